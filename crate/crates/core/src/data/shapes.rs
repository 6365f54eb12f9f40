//! Anti-aliased renderings of four geometric shape classes.

use crate::prng::SplitMix64;

pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "cross", "triangle"];

const SUPERSAMPLE: usize = 4;
const MIN_SCALE: f64 = 5.0;
const MAX_SCALE: f64 = 9.0;

#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
}

fn inside(class: usize, p: Placement, x: f64, y: f64) -> bool {
    let dx = x - p.cx;
    let dy = y - p.cy;
    let s = p.scale;
    match class {
        0 => dx * dx + dy * dy <= s * s,
        // equal area to the disk
        1 => {
            let half = s * std::f64::consts::PI.sqrt() / 2.0;
            dx.abs() <= half && dy.abs() <= half
        }
        2 => {
            let arm = 0.35 * s;
            (dx.abs() <= s && dy.abs() <= arm) || (dy.abs() <= s && dx.abs() <= arm)
        }
        3 => {
            // apex at top, base at cy + s
            let depth = dy + s;
            (0.0..=2.0 * s).contains(&depth) && dx.abs() <= 0.55 * depth
        }
        _ => unreachable!("shape class {class}"),
    }
}

/// Renders one `size × size` image of `class` with position and scale
/// jitter drawn from `rng`. Pixel values lie in `[0, 1]` (coverage fraction).
pub fn render(class: usize, size: usize, rng: &mut SplitMix64) -> Vec<f64> {
    assert!(class < CLASS_NAMES.len(), "unknown shape class {class}");
    let scale = rng.uniform(MIN_SCALE, MAX_SCALE).min(size as f64 / 2.0 - 1.5);
    let margin = scale + 1.0;
    let span = (size as f64 - 2.0 * margin).max(0.0);
    let placement = Placement {
        cx: margin + span * rng.next_f64(),
        cy: margin + span * rng.next_f64(),
        scale,
    };
    let step = 1.0 / SUPERSAMPLE as f64;
    let per_pixel = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut img = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    if inside(class, placement, x, y) {
                        hits += 1;
                    }
                }
            }
            img[py * size + px] = hits as f64 / per_pixel;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixels_in_unit_range_and_nonempty() {
        let mut rng = SplitMix64::new(3);
        for class in 0..4 {
            for _ in 0..10 {
                let img = render(class, 32, &mut rng);
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(img.iter().sum::<f64>() > 20.0, "class {class} too small");
                // nothing touches the border
                assert!(img[..32].iter().all(|&v| v == 0.0));
            }
        }
    }
}
