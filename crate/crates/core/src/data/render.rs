//! Rasterize scenes into paired optical (3-plane) and thermal (1-plane)
//! images in [0,1], with condition-dependent degradation.
//!
//! Night multiplies optical contrast by 0.15 toward black and adds seeded
//! gaussian noise (σ = 0.1); the thermal plane is untouched by night. Fog
//! box-blurs both modalities (5×5) and halves contrast around mid-gray.
//! All pixels are quantized through f32 so files round-trip exactly.

use crate::error::Result;
use crate::tensor::{derive_seed, SeededRng, Tensor};

use super::scene::{Condition, EntityKind, Heading, SceneSpec};

pub const NIGHT_CONTRAST: f64 = 0.15;
pub const NIGHT_NOISE_STD: f64 = 0.1;
pub const FOG_CONTRAST: f64 = 0.5;
const BLUR_RADIUS: usize = 2; // 5x5 box

const OPT_BACKGROUND: [f64; 3] = [0.46, 0.48, 0.44];
const OPT_ROAD: [f64; 3] = [0.30, 0.30, 0.32];
const OPT_CROSSWALK: [f64; 3] = [0.82, 0.82, 0.80];
const TIR_BACKGROUND: f64 = 0.10;
const TIR_ROAD: f64 = 0.18;

const COLOR_RGB: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15], // red
    [0.20, 0.30, 0.85], // blue
    [0.15, 0.75, 0.20], // green
    [0.92, 0.92, 0.92], // white
    [0.90, 0.85, 0.15], // yellow
    [0.90, 0.50, 0.10], // orange
];

/// Pedestrians render in one fixed vivid tone so they are visually distinct
/// from the vehicle palette; their color index stays metadata-only.
const PEDESTRIAN_RGB: [f64; 3] = [0.95, 0.20, 0.75];

const RENDER_NOISE_SALT: u64 = 0x5245_4e44; // per-scene noise stream tag

/// Paired rasterized images: optical `[3×H×W]`, thermal `[1×H×W]`.
#[derive(Clone, Debug)]
pub struct RenderedPair {
    pub opt: Tensor,
    pub tir: Tensor,
}

pub fn color_rgb(index: u8) -> [f64; 3] {
    COLOR_RGB[index as usize % COLOR_RGB.len()]
}

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn new(w: usize, h: usize, fill: f64) -> Self {
        Plane {
            w,
            h,
            data: vec![fill; w * h],
        }
    }

    fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, v: f64) {
        let xa = (x0.max(0.0).floor() as usize).min(self.w);
        let xb = (x1.min(self.w as f64).ceil() as usize).min(self.w);
        let ya = (y0.max(0.0).floor() as usize).min(self.h);
        let yb = (y1.min(self.h as f64).ceil() as usize).min(self.h);
        for y in ya..yb {
            for x in xa..xb {
                self.set(x, y, v);
            }
        }
    }

    /// Count-normalized box blur, so edges do not darken.
    fn box_blur(&self, radius: usize) -> Plane {
        let mut out = Plane::new(self.w, self.h, 0.0);
        let r = radius as isize;
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx >= 0 && yy >= 0 && (xx as usize) < self.w && (yy as usize) < self.h {
                            acc += self.data[yy as usize * self.w + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out.data[y as usize * self.w + x as usize] = acc / cnt;
            }
        }
        out
    }
}

fn front_strip(e_bbox: &crate::memory::BoundingBox, heading: Heading) -> (f64, f64, f64, f64) {
    let b = e_bbox;
    match heading {
        Heading::N => (b.x0, b.y0, b.x1, (b.y0 + 1.5).min(b.y1)),
        Heading::S => (b.x0, (b.y1 - 1.5).max(b.y0), b.x1, b.y1),
        Heading::E => ((b.x1 - 1.5).max(b.x0), b.y0, b.x1, b.y1),
        Heading::W => (b.x0, b.y0, (b.x0 + 1.5).min(b.x1), b.y1),
    }
}

pub fn render_pair(scene: &SceneSpec) -> Result<RenderedPair> {
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut opt: Vec<Plane> = (0..3).map(|c| Plane::new(w, h, OPT_BACKGROUND[c])).collect();
    let mut tir = Plane::new(w, h, TIR_BACKGROUND);

    for lane in &scene.lanes {
        let r = &lane.rect;
        for (c, plane) in opt.iter_mut().enumerate() {
            plane.fill_rect(r.x0, r.y0, r.x1, r.y1, OPT_ROAD[c]);
        }
        tir.fill_rect(r.x0, r.y0, r.x1, r.y1, TIR_ROAD);
    }
    // Crosswalk paint is visible optically only; it carries no heat.
    for cw in &scene.crosswalks {
        for (c, plane) in opt.iter_mut().enumerate() {
            plane.fill_rect(cw.x0, cw.y0, cw.x1, cw.y1, OPT_CROSSWALK[c]);
        }
    }

    for e in &scene.entities {
        let rgb = if e.kind == EntityKind::Pedestrian {
            PEDESTRIAN_RGB
        } else {
            color_rgb(e.color_index)
        };
        let b = &e.bbox;
        for (c, plane) in opt.iter_mut().enumerate() {
            plane.fill_rect(b.x0, b.y0, b.x1, b.y1, rgb[c]);
        }
        tir.fill_rect(b.x0, b.y0, b.x1, b.y1, e.heat_level);
        if e.kind != EntityKind::Pedestrian {
            let (fx0, fy0, fx1, fy1) = front_strip(b, e.heading);
            for (c, plane) in opt.iter_mut().enumerate() {
                plane.fill_rect(fx0, fy0, fx1, fy1, (rgb[c] * 0.45).clamp(0.0, 1.0));
            }
            tir.fill_rect(fx0, fy0, fx1, fy1, (e.heat_level * 1.12).clamp(0.0, 1.0));
        }
    }

    match scene.condition {
        Condition::Day => {}
        Condition::Night => {
            let mut noise = SeededRng::new(derive_seed(RENDER_NOISE_SALT, scene.id));
            for plane in opt.iter_mut() {
                for v in &mut plane.data {
                    *v = (*v * NIGHT_CONTRAST + noise.normal(0.0, NIGHT_NOISE_STD)).clamp(0.0, 1.0);
                }
            }
            // Thermal plane is independent of illumination.
        }
        Condition::Fog => {
            for plane in opt.iter_mut() {
                let blurred = plane.box_blur(BLUR_RADIUS);
                plane.data = blurred.data;
                for v in &mut plane.data {
                    *v = (0.5 + (*v - 0.5) * FOG_CONTRAST).clamp(0.0, 1.0);
                }
            }
            let blurred = tir.box_blur(BLUR_RADIUS);
            tir.data = blurred.data;
            for v in &mut tir.data {
                *v = (0.5 + (*v - 0.5) * FOG_CONTRAST).clamp(0.0, 1.0);
            }
        }
    }

    // Quantize through f32 so the on-disk representation is exact.
    let q = |v: f64| (v as f32) as f64;
    let mut opt_data = Vec::with_capacity(3 * w * h);
    for plane in &opt {
        opt_data.extend(plane.data.iter().map(|&v| q(v)));
    }
    let tir_data: Vec<f64> = tir.data.iter().map(|&v| q(v)).collect();

    Ok(RenderedPair {
        opt: Tensor::new(vec![3, h, w], opt_data)?,
        tir: Tensor::new(vec![1, h, w], tir_data)?,
    })
}
