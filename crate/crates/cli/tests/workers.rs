// Kept in its own binary: the variable is process-wide.

#[test]
fn worker_count_comes_from_the_environment() {
    std::env::set_var(filament_sr::WORKERS_ENV, "2");
    assert_eq!(filament_sr::worker_count(Some(5)).unwrap(), Some(2));
    std::env::set_var(filament_sr::WORKERS_ENV, "zero");
    assert!(filament_sr::worker_count(None).is_err());
    std::env::remove_var(filament_sr::WORKERS_ENV);
    assert_eq!(filament_sr::worker_count(Some(5)).unwrap(), Some(5));
    assert_eq!(filament_sr::worker_count(None).unwrap(), None);
}
