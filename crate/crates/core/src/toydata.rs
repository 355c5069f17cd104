//! Procedural face-like toy images: ellipse geometry plus low-frequency
//! texture. Keeps the workspace self-contained; any directory of real PNGs
//! can be substituted.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::Result;
use crate::imaging::{save_image, Image};
use crate::seeds;

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    color: [f32; 3],
}

impl Ellipse {
    /// Coverage in [0,1] with a soft edge roughly `soft` wide in implicit units.
    fn coverage(&self, x: f32, y: f32, soft: f32) -> f32 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let f = dx * dx + dy * dy;
        ((1.0 + soft - f) / soft).clamp(0.0, 1.0)
    }
}

fn blend(dst: &mut [f32; 3], src: [f32; 3], a: f32) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - a) + src[c] * a;
    }
}

/// One deterministic face-like image for (seed, index).
pub fn generate_face(size: usize, seed: u64, index: u64) -> Image {
    let mut rng = seeds::rng(seed, "toydata.face", index);
    let s = size as f32;

    // palette
    let skin = [
        0.78 + rng.random_range(-0.12..0.12),
        0.62 + rng.random_range(-0.12..0.10),
        0.50 + rng.random_range(-0.12..0.10),
    ];
    let hair = [
        0.15 + rng.random_range(0.0..0.35),
        0.10 + rng.random_range(0.0..0.25),
        0.05 + rng.random_range(0.0..0.20),
    ];
    let bg_top = [
        0.25 + rng.random_range(0.0..0.5),
        0.30 + rng.random_range(0.0..0.5),
        0.40 + rng.random_range(0.0..0.5),
    ];
    let bg_bot = [
        bg_top[0] * rng.random_range(0.4..0.9),
        bg_top[1] * rng.random_range(0.4..0.9),
        bg_top[2] * rng.random_range(0.4..0.9),
    ];

    // geometry (normalized coordinates)
    let cx = 0.5 + rng.random_range(-0.05..0.05);
    let cy = 0.52 + rng.random_range(-0.04..0.04);
    let head_rx = rng.random_range(0.26..0.34);
    let head_ry = rng.random_range(0.33..0.42);
    let tilt = rng.random_range(-0.06..0.06f32);
    let eye_dx = rng.random_range(0.10..0.15);
    let eye_y = cy - rng.random_range(0.06..0.11);
    let eye_r = rng.random_range(0.030..0.045);
    let mouth_y = cy + rng.random_range(0.14..0.20);
    let mouth_rx = rng.random_range(0.08..0.14);
    let mouth_ry = rng.random_range(0.02..0.04);
    let eye_color = [0.08, 0.07 + rng.random_range(0.0..0.2), 0.10 + rng.random_range(0.0..0.3)];
    let mouth_color = [0.55 + rng.random_range(0.0..0.2), 0.2, 0.25];

    let head = Ellipse {
        cx,
        cy,
        rx: head_rx,
        ry: head_ry,
        color: skin,
    };
    let hair_cap = Ellipse {
        cx,
        cy: cy - head_ry * 0.62,
        rx: head_rx * 1.06,
        ry: head_ry * 0.55,
        color: hair,
    };
    let eyes = [
        Ellipse {
            cx: cx - eye_dx,
            cy: eye_y,
            rx: eye_r,
            ry: eye_r * 0.75,
            color: eye_color,
        },
        Ellipse {
            cx: cx + eye_dx,
            cy: eye_y,
            rx: eye_r,
            ry: eye_r * 0.75,
            color: eye_color,
        },
    ];
    let mouth = Ellipse {
        cx,
        cy: mouth_y,
        rx: mouth_rx,
        ry: mouth_ry,
        color: mouth_color,
    };

    // low-frequency texture phases
    let tex: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(2.0..7.0),
                rng.random_range(2.0..7.0),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.01..0.035),
            )
        })
        .collect();

    let soft = 6.0 / s; // edge softness in implicit units
    let mut data = Vec::with_capacity(size * size * 3);
    for yi in 0..size {
        for xi in 0..size {
            let x0 = (xi as f32 + 0.5) / s;
            let y0 = (yi as f32 + 0.5) / s;
            // small shear stands in for head tilt
            let x = x0 + tilt * (y0 - cy);
            let y = y0;

            let t = y0;
            let mut px = [
                bg_top[0] * (1.0 - t) + bg_bot[0] * t,
                bg_top[1] * (1.0 - t) + bg_bot[1] * t,
                bg_top[2] * (1.0 - t) + bg_bot[2] * t,
            ];
            let head_a = head.coverage(x, y, soft);
            // shade the face slightly toward its rim
            let dxn = (x - cx) / head_rx;
            let dyn_ = (y - cy) / head_ry;
            let shade = 1.0 - 0.25 * (dxn * dxn + dyn_ * dyn_).min(1.0);
            let shaded = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
            blend(&mut px, shaded, head_a);
            let hair_a = hair_cap.coverage(x, y, soft) * head_a.max(0.4);
            blend(&mut px, hair_cap.color, hair_a);
            for e in &eyes {
                blend(&mut px, e.color, e.coverage(x, y, soft * 2.0) * head_a);
            }
            blend(&mut px, mouth.color, mouth.coverage(x, y, soft * 2.0) * head_a);

            let mut tv = 0.0;
            for &(fx, fy, ph, amp) in &tex {
                tv += amp * (fx * std::f32::consts::TAU * x0 + fy * std::f32::consts::TAU * y0 + ph).sin();
            }
            for c in px.iter_mut() {
                *c = (*c + tv).clamp(0.0, 1.0);
            }
            data.extend_from_slice(&px);
        }
    }
    Image::new(size, size, 3, data).expect("generated samples are clamped")
}

/// Writes `count` faces into `dir` as face_00000.png .. and returns the paths.
pub fn generate_dataset(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = generate_face(size, seed, i as u64);
        let p = dir.join(format!("face_{i:05}.png"));
        save_image(&img, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// In-memory dataset without touching disk.
pub fn generate_images(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| generate_face(size, seed, i as u64))
        .collect()
}
