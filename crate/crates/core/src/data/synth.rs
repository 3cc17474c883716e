//! Procedural passive-millimetre-wave-like scenes: a warm body with cold
//! metal-like objects, uneven brightness, scan stripes and sensor noise.

use serde::{Deserialize, Serialize};

use super::{Annotation, DatasetRecord, GrayImage, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Probability that each class slot holds an object.
    pub place_prob: [f64; 4],
    pub background: f64,
    /// Body brightness at its centre line.
    pub body_brightness: f64,
    /// Extra brightness of the chest region.
    pub chest_boost: f64,
    /// Left-to-right ambient brightness slope across the image.
    pub ambient_gradient: f64,
    pub noise_sigma: f64,
    pub stripe_amplitude: f64,
    /// Range of how much darker an object is than the body under it.
    pub contrast: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            place_prob: [0.5; 4],
            background: 0.15,
            body_brightness: 0.65,
            chest_boost: 0.15,
            ambient_gradient: 0.08,
            noise_sigma: 0.03,
            stripe_amplitude: 0.03,
            contrast: (0.3, 0.5),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config("scene must be at least 32×32".into()));
        }
        if self.place_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("placement probabilities must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.stripe_amplitude < 0.0 || self.contrast.0 > self.contrast.1 {
            return Err(Error::Config("invalid noise or contrast settings".into()));
        }
        Ok(())
    }
}

/// Elliptical body region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Body {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl Body {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.ax;
        let v = (y - self.cy) / self.ay;
        u * u + v * v <= 1.0
    }

    fn contains_box(&self, b: [f64; 4]) -> bool {
        [(b[0], b[1]), (b[2], b[1]), (b[0], b[3]), (b[2], b[3])]
            .iter()
            .all(|&(x, y)| self.contains(x, y))
    }
}

/// Pixel mask of an object template, anchored at its top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl Template {
    fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> bool) -> Self {
        let mut mask = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                mask.push(f(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        Self { width, height, mask }
    }

    /// Tight `(x1, y1, x2, y2)` of the set pixels relative to the template origin.
    pub fn tight_box(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.mask[y * self.width + x] {
                    b = Some(match b {
                        None => [x, y, x + 1, y + 1],
                        Some([x1, y1, x2, y2]) => [x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1)],
                    });
                }
            }
        }
        b
    }

    fn transpose(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| {
            self.mask[(x as usize) * self.width + y as usize]
        })
    }

    fn mirror(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.mask[(y as usize) * self.width + self.width - 1 - x as usize]
        })
    }
}

/// Random template for a class, scaled by `s` (1 at 128 pixels).
pub fn make_template(class: usize, s: f64, rng: &mut SeededRng) -> Template {
    let px = |v: f64| ((v * s).round() as usize).max(1);
    let t = match class {
        // wrench: thin bar with a slightly wider head
        0 => {
            let len = px(rng.range(22.0, 36.0));
            let thick = px(rng.range(3.0, 5.0));
            let head = thick + px(2.0);
            let head_len = px(5.0);
            Template::from_fn(len, head, |x, y| {
                let mid = head as f64 / 2.0;
                x < head_len as f64 || (y - mid).abs() <= thick as f64 / 2.0
            })
        }
        // bottle: rounded rectangle
        1 => {
            let w = px(rng.range(10.0, 16.0));
            let h = px(rng.range(18.0, 28.0));
            let r = (w.min(h) as f64 / 3.0).max(1.0);
            Template::from_fn(w, h, |x, y| {
                let cx = x.clamp(r, w as f64 - r);
                let cy = y.clamp(r, h as f64 - r);
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            })
        }
        // knife: elongated triangle, point at the right
        2 => {
            let len = px(rng.range(22.0, 34.0));
            let base = px(rng.range(6.0, 10.0));
            Template::from_fn(len, base, |x, y| {
                let half = base as f64 / 2.0 * (1.0 - x / len as f64);
                (y - base as f64 / 2.0).abs() <= half.max(0.5)
            })
        }
        // pistol: barrel along the top, grip down from the left end
        _ => {
            let barrel = px(rng.range(18.0, 26.0));
            let bt = px(rng.range(5.0, 7.0));
            let gw = px(rng.range(5.0, 8.0));
            let gh = px(rng.range(10.0, 16.0));
            Template::from_fn(barrel, bt + gh, |x, y| y < bt as f64 || x < gw as f64)
        }
    };
    let t = if rng.bernoulli(0.5) { t.mirror() } else { t };
    if rng.bernoulli(0.5) {
        t.transpose()
    } else {
        t
    }
}

fn boxes_touch(a: [f64; 4], b: [f64; 4], margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

/// Renders one scene. Deterministic per `seed`.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<(GrayImage, Vec<Annotation>)> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let s = w.min(h) / 128.0;
    let body = Body {
        cx: w / 2.0 + rng.range(-4.0, 4.0) * s,
        cy: h / 2.0 + rng.range(-4.0, 4.0) * s,
        ax: w * rng.range(0.29, 0.34),
        ay: h * rng.range(0.40, 0.46),
    };
    let chest_y = body.cy - body.ay * 0.35;

    let mut img = GrayImage::filled(spec.width, spec.height, 0.0);
    let mut base = vec![0.0f64; spec.width * spec.height];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let ambient = spec.ambient_gradient * (fx / w - 0.5);
            let v = if body.contains(fx, fy) {
                let dy = (fy - chest_y) / (body.ay * 0.35);
                let dx = (fx - body.cx) / (body.ax * 0.7);
                spec.body_brightness + spec.chest_boost * (-(dx * dx + dy * dy)).exp()
            } else {
                spec.background
            };
            base[y * spec.width + x] = v + ambient;
        }
    }

    let mut anns = Vec::new();
    for (class, &p) in spec.place_prob.iter().enumerate() {
        if !rng.bernoulli(p) {
            continue;
        }
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let t = make_template(class, s, &mut rng);
            if t.width + 2 >= spec.width || t.height + 2 >= spec.height {
                continue;
            }
            let ox = rng.below(spec.width - t.width);
            let oy = rng.below(spec.height - t.height);
            let Some(tb) = t.tight_box() else { continue };
            let bbox = [
                (ox + tb[0]) as f64,
                (oy + tb[1]) as f64,
                (ox + tb[2]) as f64,
                (oy + tb[3]) as f64,
            ];
            if !body.contains_box(bbox) || anns.iter().any(|a: &Annotation| boxes_touch(a.bbox, bbox, 2.0)) {
                continue;
            }
            let contrast = rng.range(spec.contrast.0, spec.contrast.1);
            for y in 0..t.height {
                for x in 0..t.width {
                    if t.mask[y * t.width + x] {
                        base[(oy + y) * spec.width + ox + x] -= contrast;
                    }
                }
            }
            anns.push(Annotation { class_id: class, bbox });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                class: CLASS_NAMES[class].into(),
                tries: PLACEMENT_TRIES,
            });
        }
    }

    let period = rng.range(5.0, 11.0) * s;
    let phase = rng.range(0.0, std::f64::consts::TAU);
    for y in 0..spec.height {
        let stripe = spec.stripe_amplitude * ((y as f64 / period) * std::f64::consts::TAU + phase).sin();
        for x in 0..spec.width {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.normal()
            } else {
                0.0
            };
            let v = base[y * spec.width + x] + stripe + noise;
            img.set(x, y, v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok((img, anns))
}

/// `count` scenes with per-index seeds derived from `seed`.
pub fn synth_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let s = SeededRng::derive(seed, i as u64).next_u64();
            let (image, annotations) = synth_scene(spec, s)?;
            Ok(Sample {
                record: DatasetRecord {
                    id: i,
                    file: format!("images/{i:05}.pgm"),
                    width: image.width,
                    height: image.height,
                    annotations,
                },
                image,
            })
        })
        .collect()
}
