//! Z-buffer output against brute-force ray casting on random meshes.

mod support;

#[test]
fn zbuffer_matches_ray_casting_on_random_meshes() {
    let stats = support::rasterizer_check(100, 64, 2024).unwrap();
    assert!(stats.max_depth_error < 1e-5, "depth error {}", stats.max_depth_error);
    assert!(
        stats.compared > 100 * 64 * 64 * 99 / 100,
        "too many edge pixels skipped: {}",
        stats.edge_pixels
    );
}
