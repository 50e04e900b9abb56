use voxfield::camera::{orbit_cameras, Intrinsics, Ray};
use voxfield::grid::Vec3;
use voxfield::losses::{mse, psnr};
use voxfield::render::{fuse_visibility, PruneThresholds};
use voxfield::synth::bake;
use voxfield::{AnalyticScene, Background, ColorImage, RenderSettings};

/// Midpoint quadrature of the continuous field along the chord through the
/// sphere's bounding ball.
fn trace(scene: &AnalyticScene, ray: &Ray, radius: f64, bg: [f64; 3]) -> [f64; 3] {
    let oc = ray.origin;
    let b = oc.dot(&ray.direction);
    let disc = b * b - (oc.norm_squared() - radius * radius);
    if disc <= 0.0 {
        return bg;
    }
    let (t0, t1) = (-b - disc.sqrt(), -b + disc.sqrt());
    let n = ((t1 - t0) / 2e-4).ceil() as usize;
    let dt = (t1 - t0) / n as f64;
    let mut trans = 1.0;
    let mut c = [0.0; 3];
    for i in 0..n {
        let (sigma, color) = scene.eval(&ray.at(t0 + (i as f64 + 0.5) * dt));
        let alpha = 1.0 - (-sigma * dt).exp();
        for ch in 0..3 {
            c[ch] += trans * alpha * color[ch];
        }
        trans *= 1.0 - alpha;
    }
    std::array::from_fn(|ch| c[ch] + trans * bg[ch])
}

#[test]
fn baked_sphere_matches_ray_traced_field() {
    let scene = AnalyticScene::sphere(0.5).unwrap();
    let grid = bake(&scene, 128).unwrap();
    let bg = [0.1, 0.2, 0.3];
    for cam in orbit_cameras(3, 2.5, 0.3, Intrinsics::from_fov_y(64, 64, 0.9)).unwrap() {
        let out = voxfield::render_image(&grid, &cam, &Background::Constant(bg), &RenderSettings::default()).unwrap();
        let mut oracle = ColorImage::filled(64, 64, [0.0; 3]);
        for y in 0..64 {
            for x in 0..64 {
                let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                oracle.data[(y * 64 + x) as usize] = trace(&scene, &ray, 0.5, bg);
            }
        }
        let p = psnr(mse(&out.color, &oracle).unwrap());
        assert!(p > 35.0, "psnr {p}");
    }
}

#[test]
fn fused_mask_of_opaque_sphere_is_a_shell() {
    let mut scene = AnalyticScene::sphere(0.5).unwrap();
    scene.sigma_max = 400.0;
    let grid = bake(&scene, 64).unwrap();
    let cams = orbit_cameras(16, 2.5, 0.3, Intrinsics::from_fov_y(128, 128, 0.9)).unwrap();
    let mask = fuse_visibility(&grid, &cams, &PruneThresholds::default(), &RenderSettings::default()).unwrap();
    assert!(mask.count() > 0);
    let vs = grid.voxel_size();
    let mut shell_radii = Vec::new();
    for lin in mask.iter() {
        let [i, j, k] = grid.lattice_coords(lin);
        let r = grid.cell_center(i, j, k).norm();
        shell_radii.push(r);
        // Light stops within a couple of voxels of the surface.
        assert!(r > 0.5 - 4.0 * vs, "voxel at radius {r} is deep inside");
        assert!(r < 0.5 + vs, "voxel at radius {r} is outside the sphere");
    }
    let interior = grid
        .indices()
        .iter()
        .filter(|&&lin| {
            let [i, j, k] = grid.lattice_coords(lin);
            grid.cell_center(i, j, k).norm() < 0.35
        })
        .count();
    assert!(interior > 1000);
    assert!(mask.iter().all(|lin| {
        let [i, j, k] = grid.lattice_coords(lin);
        grid.cell_center(i, j, k).norm() >= 0.35
    }));
    // The orbit sees most of the surface, not just one side.
    let octants: std::collections::HashSet<[bool; 3]> = mask
        .iter()
        .map(|lin| {
            let [i, j, k] = grid.lattice_coords(lin);
            let p: Vec3 = grid.cell_center(i, j, k);
            [p.x > 0.0, p.y > 0.0, p.z > 0.0]
        })
        .collect();
    assert_eq!(octants.len(), 8);
}
