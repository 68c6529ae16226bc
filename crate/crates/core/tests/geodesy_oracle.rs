mod common;

use geofuse::geodesy::{central_meridian, latlon_to_utm, project, unproject, utm_to_latlon, GeoFix, Hemisphere};
use proptest::prelude::*;

use common::load_utm_oracle;

#[test]
fn grid_points_match_reference_projection() {
    let rows = load_utm_oracle();
    assert_eq!(rows.iter().filter(|r| r.grid).count(), 100);
    for r in &rows {
        let u = project(r.lat, r.lon, 0.0, Some(r.zone)).unwrap();
        assert_eq!(u.zone, r.zone);
        assert_eq!(u.hemisphere == Hemisphere::South, r.south, "{}, {}", r.lat, r.lon);
        assert!(
            (u.easting - r.easting).abs() < 0.01,
            "{}, {}: easting {} vs {}",
            r.lat,
            r.lon,
            u.easting,
            r.easting
        );
        assert!(
            (u.northing - r.northing).abs() < 0.01,
            "{}, {}: northing {} vs {}",
            r.lat,
            r.lon,
            u.northing,
            r.northing
        );
    }
}

#[test]
fn known_site_lands_in_zone_17_north() {
    let fix = GeoFix::new(0.0, 43.945, -78.896, 100.0);
    let u = latlon_to_utm(&fix, None).unwrap();
    assert_eq!(u.zone, 17);
    assert_eq!(u.hemisphere, Hemisphere::North);
    let row = load_utm_oracle()
        .into_iter()
        .find(|r| !r.grid && r.lat == 43.945 && r.lon == -78.896)
        .expect("fixture carries the site");
    assert!((u.easting - row.easting).abs() < 0.01);
    assert!((u.northing - row.northing).abs() < 0.01);
    assert_eq!(u.altitude, 100.0);
}

#[test]
fn inverse_recovers_grid_points() {
    for r in load_utm_oracle() {
        let u = project(r.lat, r.lon, 12.5, Some(r.zone)).unwrap();
        let back = utm_to_latlon(&u, 3.0).unwrap();
        assert!((back.latitude - r.lat).abs() < 1e-9);
        assert!((back.longitude - r.lon).abs() < 1e-9);
        assert_eq!(back.altitude, 12.5);
        assert_eq!(back.timestamp, 3.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_within_zone(lat in -80.0..84.0f64, zone in 1u8..=60, dlon in -3.0..3.0f64) {
        let lon = central_meridian(zone) + dlon;
        let u = project(lat, lon, 0.0, Some(zone)).unwrap();
        let (lat2, lon2, _) = unproject(&u).unwrap();
        prop_assert!((lat2 - lat).abs() < 1e-9);
        prop_assert!((lon2 - lon).abs() < 1e-9);
    }

    #[test]
    fn central_meridian_maps_to_false_easting(lat in -80.0..84.0f64, zone in 1u8..=60) {
        let u = project(lat, central_meridian(zone), 0.0, Some(zone)).unwrap();
        prop_assert!((u.easting - 500_000.0).abs() < 1e-6);
    }
}
