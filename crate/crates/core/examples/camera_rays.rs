//! Projects a world point into every camera of a ring rig and casts the
//! pixel back into a ray through the same point.

use lara::geometry::{azimuth, pixel_ray_direction, project_point, Projection};
use lara::synthdata::default_rig;
use nalgebra::Vector3;

fn main() {
    let rig = default_rig(4, 64, 112, 100.0).unwrap();
    let point = Vector3::new(6.0, 2.5, 0.5);
    println!("point {:?}, azimuth {:.1} deg", point.as_slice(), azimuth(&point).to_degrees());
    for (i, cam) in rig.cameras().iter().enumerate() {
        match project_point(&point, &cam.intrinsics, &cam.extrinsics) {
            Projection::Visible { pixel, depth } => {
                let dir = pixel_ray_direction(pixel, &cam.intrinsics, cam.extrinsics.rotation());
                let to_point = (point - cam.extrinsics.translation()).normalize();
                let inside = pixel[0] >= 0.0 && pixel[0] < cam.width as f64 && pixel[1] >= 0.0 && pixel[1] < cam.height as f64;
                println!(
                    "camera {i}: pixel ({:.2}, {:.2}) depth {depth:.2} m{}, ray error {:.1e}",
                    pixel[0],
                    pixel[1],
                    if inside { "" } else { " (outside the image)" },
                    (dir.normalize() - to_point).norm()
                );
            }
            Projection::Behind => println!("camera {i}: behind"),
        }
    }
}
