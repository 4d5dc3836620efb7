//! Synthetic stand-ins for the three evaluation corpora, sized for desk runs.
//!
//! * [`moving_digits`]: two bitmap digits bouncing in a dark 64×64 canvas.
//! * [`surveillance`]: grayscale fixed-camera scenes with walking figures.
//! * [`color_actions`]: color scenes with a panning background and a moving
//!   actor, labelled by action category.
//!
//! All generators are deterministic in their seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, Frame, FrameSequence};

/// 5×7 glyphs for 0–9, one row per byte, high bit on the left.
const GLYPHS: [[u8; 7]; 10] = [
    [
        0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110,
    ],
    [
        0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
    ],
    [
        0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111,
    ],
    [
        0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110,
    ],
    [
        0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010,
    ],
    [
        0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110,
    ],
    [
        0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110,
    ],
    [
        0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000,
    ],
    [
        0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110,
    ],
    [
        0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100,
    ],
];

/// Side of a rendered digit patch.
pub const DIGIT_SIDE: usize = 28;

/// Action labels used by [`surveillance`].
pub const SURVEILLANCE_LABELS: [&str; 4] = ["walking", "browsing", "meeting", "fighting"];

/// Renders digit `d` as a 28×28 patch: 4× upscaled glyph with a soft edge.
pub fn digit_patch(d: usize) -> Vec<f32> {
    let glyph = &GLYPHS[d % 10];
    let mut hard = vec![0f32; DIGIT_SIDE * DIGIT_SIDE];
    let (oy, ox) = (0, 4);
    for (r, row) in glyph.iter().enumerate() {
        for c in 0..5 {
            if row >> (4 - c) & 1 == 1 {
                for y in 0..4 {
                    for x in 0..4 {
                        hard[(oy + r * 4 + y) * DIGIT_SIDE + ox + c * 4 + x] = 1.0;
                    }
                }
            }
        }
    }
    // 3×3 box blur for anti-aliased strokes.
    let mut soft = vec![0f32; hard.len()];
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if (0..DIGIT_SIDE as i32).contains(&yy) && (0..DIGIT_SIDE as i32).contains(&xx)
                    {
                        s += hard[yy as usize * DIGIT_SIDE + xx as usize];
                        n += 1.0;
                    }
                }
            }
            soft[y * DIGIT_SIDE + x] = s / n;
        }
    }
    soft
}

/// Position and velocity of a sprite that reflects off the canvas walls.
struct Bouncer {
    pos: [f32; 2],
    vel: [f32; 2],
    limit: f32,
}

impl Bouncer {
    fn random(rng: &mut ChaCha8Rng, limit: f32, speed: f32) -> Self {
        let theta = rng.random_range(0.0..std::f32::consts::TAU);
        Self {
            pos: [rng.random_range(0.0..limit), rng.random_range(0.0..limit)],
            vel: [speed * theta.sin(), speed * theta.cos()],
            limit,
        }
    }

    fn advance(&mut self) {
        for a in 0..2 {
            self.pos[a] += self.vel[a];
            if self.pos[a] < 0.0 {
                self.pos[a] = -self.pos[a];
                self.vel[a] = -self.vel[a];
            } else if self.pos[a] > self.limit {
                self.pos[a] = 2.0 * self.limit - self.pos[a];
                self.vel[a] = -self.vel[a];
            }
        }
    }
}

/// Two digits bouncing around a `side`×`side` canvas, combined by maximum.
pub fn moving_digits(sequences: usize, length: usize, side: usize, seed: u64) -> Dataset {
    assert!(side >= DIGIT_SIDE, "canvas smaller than a digit");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = (side - DIGIT_SIDE) as f32;
    let seqs = (0..sequences)
        .map(|s| {
            let mut digits: Vec<(Vec<f32>, Bouncer)> = (0..2)
                .map(|_| {
                    let d = rng.random_range(0..10);
                    let speed = rng.random_range(2.0..4.0);
                    (digit_patch(d), Bouncer::random(&mut rng, limit, speed))
                })
                .collect();
            let frames = (0..length)
                .map(|_| {
                    let mut f = Frame::filled(side, side, 1, 0.0);
                    for (patch, b) in &digits {
                        let (py, px) = (b.pos[0].round() as usize, b.pos[1].round() as usize);
                        for y in 0..DIGIT_SIDE {
                            for x in 0..DIGIT_SIDE {
                                let v = patch[y * DIGIT_SIDE + x];
                                let cur = f.get(py + y, px + x, 0);
                                f.set(py + y, px + x, 0, cur.max(v));
                            }
                        }
                    }
                    for (_, b) in digits.iter_mut() {
                        b.advance();
                    }
                    f
                })
                .collect();
            FrameSequence {
                id: format!("mnist_{s:05}"),
                frames,
                label: None,
            }
        })
        .collect();
    Dataset::new(seqs)
}

/// Smooth random field: a coarse grid of uniform values bilinearly upsampled.
fn smooth_field(rng: &mut ChaCha8Rng, height: usize, width: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0f32; height * width];
    for y in 0..height {
        let gy = y as f32 / height as f32 * cells as f32;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..width {
            let gx = x as f32 / width as f32 * cells as f32;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let at = |r: usize, c: usize| grid[r.min(cells) * g + c.min(cells)];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[y * width + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Soft-edged filled ellipse blended into every channel of `frame`.
fn paint_ellipse(frame: &mut Frame, center: (f32, f32), radii: (f32, f32), value: &[f32]) {
    let (h, w, ch) = frame.dims();
    let (cy, cx) = center;
    let (ry, rx) = radii;
    let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + ry + 1.0).ceil() as usize).min(h);
    let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + rx + 1.0).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = (((y as f32 - cy) / ry).powi(2) + ((x as f32 - cx) / rx).powi(2)).sqrt();
            let alpha = ((1.0 - d) * ry.min(rx)).clamp(0.0, 1.0);
            if alpha > 0.0 {
                for c in 0..ch {
                    let cur = frame.get(y, x, c);
                    frame.set(
                        y,
                        x,
                        c,
                        cur * (1.0 - alpha) + value[c.min(value.len() - 1)] * alpha,
                    );
                }
            }
        }
    }
}

/// Fixed-camera grayscale scenes: a textured backdrop with one to three
/// figures whose motion pattern depends on the action label.
pub fn surveillance(sequences: usize, length: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f32;
    let seqs = (0..sequences)
        .map(|i| {
            let label_idx = i % SURVEILLANCE_LABELS.len();
            let bg: Vec<f32> = smooth_field(&mut rng, side, side, 4)
                .into_iter()
                .map(|v| 0.3 + 0.4 * v)
                .collect();
            let figures = 1 + label_idx.min(2);
            let mut people: Vec<([f32; 2], [f32; 2], f32)> = (0..figures)
                .map(|_| {
                    let speed = match label_idx {
                        0 => rng.random_range(0.8..1.6),
                        1 => rng.random_range(0.1..0.4),
                        2 => rng.random_range(0.4..0.8),
                        _ => rng.random_range(1.0..2.0),
                    };
                    let theta = rng.random_range(0.0..std::f32::consts::TAU);
                    let pos = [
                        rng.random_range(0.25 * s..0.75 * s),
                        rng.random_range(0.2 * s..0.8 * s),
                    ];
                    (
                        pos,
                        [speed * theta.sin() * 0.4, speed * theta.cos()],
                        rng.random_range(0.0..0.25),
                    )
                })
                .collect();
            let frames = (0..length)
                .map(|t| {
                    let mut f = Frame::new(side, side, 1, bg.clone()).expect("consistent frame");
                    for (pos, _, tone) in &people {
                        let bob = if label_idx == 3 {
                            (t as f32 * 1.3).sin() * 1.5
                        } else {
                            0.0
                        };
                        let body = (pos[0] + bob, pos[1]);
                        paint_ellipse(&mut f, body, (0.14 * s, 0.05 * s), &[*tone]);
                        paint_ellipse(
                            &mut f,
                            (body.0 - 0.17 * s, body.1),
                            (0.04 * s, 0.04 * s),
                            &[*tone + 0.1],
                        );
                    }
                    for (pos, vel, _) in people.iter_mut() {
                        for a in 0..2 {
                            pos[a] += vel[a];
                            let (lo, hi) = if a == 0 {
                                (0.25 * s, 0.8 * s)
                            } else {
                                (0.1 * s, 0.9 * s)
                            };
                            if pos[a] < lo || pos[a] > hi {
                                vel[a] = -vel[a];
                                pos[a] = pos[a].clamp(lo, hi);
                            }
                        }
                    }
                    f
                })
                .collect();
            FrameSequence {
                id: format!("icpr_{i:05}"),
                frames,
                label: Some(SURVEILLANCE_LABELS[label_idx].to_string()),
            }
        })
        .collect();
    Dataset::new(seqs)
}

/// Color scenes with camera pan, background texture and a moving actor,
/// cycling through `labels` action categories (`action_000`, ...).
pub fn color_actions(
    sequences: usize,
    length: usize,
    side: usize,
    labels: usize,
    seed: u64,
) -> Dataset {
    let labels = labels.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f32;
    let seqs = (0..sequences)
        .map(|i| {
            let label = i % labels;
            let pan = [
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ];
            let margin = (pan[0].abs().max(pan[1].abs()) * length as f32).ceil() as usize + 1;
            let big = side + 2 * margin;
            let tint: Vec<f32> = (0..3).map(|_| rng.random_range(0.2..0.8)).collect();
            let planes: Vec<Vec<f32>> = (0..3)
                .map(|_| smooth_field(&mut rng, big, big, 8))
                .collect();
            let detail = smooth_field(&mut rng, big, big, 24);
            let actor_color: Vec<f32> = (0..3).map(|_| rng.random::<f32>()).collect();
            let freq = 0.2 + 0.1 * (label % 7) as f32;
            let amp = 0.05 * s + (label % 5) as f32;
            let base = [
                rng.random_range(0.3 * s..0.7 * s),
                rng.random_range(0.3 * s..0.7 * s),
            ];
            let frames = (0..length)
                .map(|t| {
                    let oy = (margin as f32 + pan[0] * t as f32).round() as usize;
                    let ox = (margin as f32 + pan[1] * t as f32).round() as usize;
                    let mut f = Frame::filled(side, side, 3, 0.0);
                    for y in 0..side {
                        for x in 0..side {
                            let k = (y + oy) * big + x + ox;
                            for c in 0..3 {
                                let v = 0.5 * tint[c] + 0.35 * planes[c][k] + 0.15 * detail[k];
                                f.set(y, x, c, v.clamp(0.0, 1.0));
                            }
                        }
                    }
                    let phase = t as f32 * freq;
                    let center = (
                        base[0] + amp * phase.sin(),
                        base[1] + amp * (0.5 * phase).cos(),
                    );
                    paint_ellipse(&mut f, center, (0.12 * s, 0.07 * s), &actor_color);
                    let limb = (
                        center.0 + 0.05 * s * phase.cos(),
                        center.1 + 0.1 * s * phase.sin(),
                    );
                    paint_ellipse(&mut f, limb, (0.03 * s, 0.06 * s), &actor_color);
                    f
                })
                .collect();
            FrameSequence {
                id: format!("ucf_{i:05}"),
                frames,
                label: Some(format!("action_{label:03}")),
            }
        })
        .collect();
    Dataset::new(seqs)
}
