//! Procedural face renderer.
//!
//! A face is a painter's-order list of filled shapes in normalized
//! coordinates (`u` rightwards, `v` downwards, both in `[0,1]`), rendered
//! with `SUPERSAMPLE`² samples per pixel. Identity parameters fix geometry
//! and colour; global attributes restyle the base face; local attributes
//! add a glyph whose shapes are confined to a region that does not depend
//! on the glyph's state. A pixel none of whose samples hits that region is
//! therefore bit-identical with and without the glyph.

use rand::Rng;

use crate::attributes::{Attribute, Attributes};
use crate::error::{Error, Result};

pub const SUPPORTED_SIZES: [usize; 4] = [16, 32, 64, 128];
pub const SUPERSAMPLE: usize = 4;

type Rgb = [f64; 3];

/// Mask dilation in pixels: 2 at 32x32, proportional otherwise.
pub fn mask_margin(size: usize) -> usize {
    size / 16
}

pub fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "image size {size} unsupported, expected one of {SUPPORTED_SIZES:?}"
        )))
    }
}

/// Stable per-identity geometry and colour.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    pub face_rx: f64,
    pub face_ry: f64,
    pub skin_tone: f64,
    pub hair_tone: f64,
    pub hair_line: f64,
    pub eye_spacing: f64,
    pub eye_y: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub iris_tone: f64,
    pub brow_tilt: f64,
    pub nose_len: f64,
    pub mouth_w: f64,
    pub mouth_y: f64,
}

impl IdentityParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            face_rx: rng.gen_range(0.26..0.33),
            face_ry: rng.gen_range(0.35..0.41),
            skin_tone: rng.gen_range(0.0..1.0),
            hair_tone: rng.gen_range(0.0..1.0),
            hair_line: rng.gen_range(0.20..0.27),
            eye_spacing: rng.gen_range(0.105..0.14),
            eye_y: rng.gen_range(0.42..0.46),
            eye_rx: rng.gen_range(0.05..0.065),
            eye_ry: rng.gen_range(0.028..0.036),
            iris_tone: rng.gen_range(0.0..1.0),
            brow_tilt: rng.gen_range(-0.012..0.012),
            nose_len: rng.gen_range(0.07..0.11),
            mouth_w: rng.gen_range(0.08..0.12),
            mouth_y: rng.gen_range(0.70..0.74),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.face_rx,
            self.face_ry,
            self.skin_tone,
            self.hair_tone,
            self.hair_line,
            self.eye_spacing,
            self.eye_y,
            self.eye_rx,
            self.eye_ry,
            self.iris_tone,
            self.brow_tilt,
            self.nose_len,
            self.mouth_w,
            self.mouth_y,
        ]
    }
}

/// Per-sample variation unrelated to identity or attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    pub background: Rgb,
    pub shirt: Rgb,
    pub brightness: f64,
    pub frame_tone: f64,
}

impl Nuisance {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut rgb = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let background = rgb(0.55, 0.9);
        let shirt = rgb(0.1, 0.7);
        Self {
            background,
            shirt,
            brightness: rng.gen_range(0.95..1.05),
            frame_tone: rng.gen_range(0.0..1.0),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.background.to_vec();
        v.extend_from_slice(&self.shirt);
        v.push(self.brightness);
        v.push(self.frame_tone);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub identity: IdentityParams,
    pub nuisance: Nuisance,
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Upper half an ellipse, lower half a superellipse `|x|^power + y^2 <= 1`.
    Face { cx: f64, cy: f64, rx: f64, ry: f64, jaw_rx: f64, power: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Border of a rectangle, `t` thick, lying inside it.
    Frame { x0: f64, y0: f64, x1: f64, y1: f64, t: f64 },
    Capsule { ax: f64, ay: f64, bx: f64, by: f64, r: f64 },
    /// Lower half of an elliptic ring of half-thickness `t`.
    LowerArc { cx: f64, cy: f64, rx: f64, ry: f64, t: f64 },
    /// The inner shape restricted to `v < line`.
    Above(Box<Shape>, f64),
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (x, y) = ((u - cx) / rx, (v - cy) / ry);
                x * x + y * y <= 1.0
            }
            Shape::Face { cx, cy, rx, ry, jaw_rx, power } => {
                let y = (v - cy) / ry;
                if v <= cy {
                    let x = (u - cx) / rx;
                    x * x + y * y <= 1.0
                } else {
                    ((u - cx) / jaw_rx).abs().powf(power) + y * y <= 1.0
                }
            }
            Shape::Rect { x0, y0, x1, y1 } => (x0..=x1).contains(&u) && (y0..=y1).contains(&v),
            Shape::Frame { x0, y0, x1, y1, t } => {
                let outer = (x0..=x1).contains(&u) && (y0..=y1).contains(&v);
                let inner = (x0 + t..=x1 - t).contains(&u) && (y0 + t..=y1 - t).contains(&v);
                outer && !inner
            }
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let s = if len2 > 0.0 {
                    (((u - ax) * dx + (v - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (ax + s * dx - u, ay + s * dy - v);
                px * px + py * py <= r * r
            }
            Shape::LowerArc { cx, cy, rx, ry, t } => {
                if v < cy {
                    return false;
                }
                let outer = Shape::Ellipse { cx, cy, rx: rx + t, ry: ry + t };
                let inner = Shape::Ellipse { cx, cy, rx: rx - t, ry: ry - t };
                outer.contains(u, v) && !inner.contains(u, v)
            }
            Shape::Above(ref inner, line) => v < line && inner.contains(u, v),
        }
    }

    /// `(u0, v0, u1, v1)` containing every point of the shape.
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Face { cx, cy, rx, ry, jaw_rx, .. } => {
                let w = rx.max(jaw_rx);
                (cx - w, cy - ry, cx + w, cy + ry)
            }
            Shape::Rect { x0, y0, x1, y1 } | Shape::Frame { x0, y0, x1, y1, .. } => (x0, y0, x1, y1),
            Shape::Capsule { ax, ay, bx, by, r } => (ax.min(bx) - r, ay.min(by) - r, ax.max(bx) + r, ay.max(by) + r),
            Shape::LowerArc { cx, cy, rx, ry, t } => (cx - rx - t, cy, cx + rx + t, cy + ry + t),
            Shape::Above(ref inner, line) => {
                let (u0, v0, u1, v1) = inner.bbox();
                (u0, v0, u1, v1.min(line))
            }
        }
    }
}

struct Paint {
    shape: Shape,
    color: Rgb,
    alpha: f64,
}

fn paint(shape: Shape, color: Rgb) -> Paint {
    Paint { shape, color, alpha: 1.0 }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(c: Rgb, s: f64) -> Rgb {
    [c[0] * s, c[1] * s, c[2] * s]
}

/// Piecewise-linear lookup of `t` in `[0,1]` across a colour ramp.
fn ramp(stops: &[Rgb], t: f64) -> Rgb {
    let x = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    lerp(stops[i], stops[i + 1], x - i as f64)
}

fn desaturate(c: Rgb, amount: f64) -> Rgb {
    let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    lerp(c, [y, y, y], amount)
}

const FACE_CY: f64 = 0.53;

fn base_paints(p: &FaceParams, attrs: &Attributes) -> Vec<Paint> {
    let id = &p.identity;
    let elderly = attrs.get(Attribute::Elderly);
    let male = attrs.get(Attribute::Male);
    let mut skin = ramp(&[[0.95, 0.80, 0.68], [0.78, 0.58, 0.44], [0.42, 0.28, 0.19]], id.skin_tone);
    let mut hair = ramp(
        &[[0.08, 0.06, 0.05], [0.35, 0.20, 0.10], [0.60, 0.28, 0.10], [0.86, 0.72, 0.42]],
        id.hair_tone,
    );
    if elderly {
        skin = desaturate(skin, 0.6);
        hair = lerp(hair, [0.80, 0.80, 0.82], 0.85);
    }
    let iris = ramp(&[[0.20, 0.40, 0.75], [0.25, 0.50, 0.25], [0.35, 0.20, 0.08]], id.iris_tone);
    let (cx, cy) = (0.5, FACE_CY);
    let face = Shape::Face {
        cx,
        cy,
        rx: id.face_rx,
        ry: id.face_ry,
        jaw_rx: if male { id.face_rx * 1.1 } else { id.face_rx * 0.97 },
        power: if male { 3.2 } else { 2.0 },
    };

    let mut out = vec![
        paint(Shape::Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }, p.nuisance.background),
        paint(
            Shape::Above(
                Box::new(Shape::Ellipse { cx, cy: cy - 0.06, rx: id.face_rx + 0.05, ry: id.face_ry * 0.9 }),
                cy + 0.08,
            ),
            hair,
        ),
        paint(Shape::Ellipse { cx, cy: 1.1, rx: 0.42, ry: 0.2 }, p.nuisance.shirt),
        paint(Shape::Rect { x0: cx - 0.09, y0: cy + 0.2, x1: cx + 0.09, y1: 0.95 }, scale(skin, 0.85)),
        paint(face, skin),
        paint(
            Shape::Above(
                Box::new(Shape::Ellipse { cx, cy, rx: id.face_rx + 0.01, ry: id.face_ry + 0.01 }),
                id.hair_line,
            ),
            hair,
        ),
    ];

    if elderly {
        let wrinkle = scale(skin, 0.7);
        for dv in [0.04, 0.07] {
            let v = id.hair_line + dv;
            out.push(paint(Shape::Capsule { ax: cx - 0.12, ay: v, bx: cx + 0.12, by: v, r: 0.007 }, wrinkle));
        }
        for side in [-1.0, 1.0] {
            out.push(paint(
                Shape::Capsule {
                    ax: cx + side * 0.07,
                    ay: id.eye_y + 0.1,
                    bx: cx + side * (id.mouth_w + 0.035),
                    by: id.mouth_y + 0.02,
                    r: 0.008,
                },
                wrinkle,
            ));
        }
    }

    for side in [-1.0, 1.0] {
        let ex = cx + side * id.eye_spacing;
        let brow_y = id.eye_y - 0.065;
        out.push(paint(
            Shape::Capsule {
                ax: ex - id.eye_rx,
                ay: brow_y - side * id.brow_tilt,
                bx: ex + id.eye_rx,
                by: brow_y + side * id.brow_tilt,
                r: 0.013,
            },
            scale(hair, 0.8),
        ));
        out.push(paint(Shape::Ellipse { cx: ex, cy: id.eye_y, rx: id.eye_rx, ry: id.eye_ry }, [0.94, 0.94, 0.90]));
        let r = id.eye_ry * 0.95;
        out.push(paint(Shape::Ellipse { cx: ex, cy: id.eye_y, rx: r, ry: r }, iris));
        let r = id.eye_ry * 0.45;
        out.push(paint(Shape::Ellipse { cx: ex, cy: id.eye_y, rx: r, ry: r }, [0.03, 0.03, 0.03]));
    }

    let nose = scale(skin, 0.8);
    let tip = id.eye_y + id.nose_len;
    out.push(paint(Shape::Capsule { ax: cx, ay: id.eye_y + 0.03, bx: cx + 0.01, by: tip, r: 0.01 }, nose));
    out.push(paint(Shape::Capsule { ax: cx - 0.025, ay: tip, bx: cx + 0.025, by: tip, r: 0.009 }, nose));
    out
}

fn mouth_paints(id: &IdentityParams, open: bool) -> Vec<Paint> {
    let lips = [0.62, 0.22, 0.24];
    if open {
        let (cy, rx) = (id.mouth_y + 0.005, id.mouth_w);
        let inner = Shape::Ellipse { cx: 0.5, cy, rx: rx * 0.72, ry: 0.03 };
        vec![
            paint(Shape::Ellipse { cx: 0.5, cy, rx: rx * 0.88, ry: 0.046 }, lips),
            paint(inner.clone(), [0.18, 0.04, 0.05]),
            paint(Shape::Above(Box::new(inner), cy - 0.012), [0.95, 0.93, 0.88]),
        ]
    } else {
        vec![paint(
            Shape::LowerArc { cx: 0.5, cy: id.mouth_y - 0.015, rx: id.mouth_w, ry: 0.03, t: 0.014 },
            lips,
        )]
    }
}

fn glasses_paints(p: &FaceParams) -> Vec<Paint> {
    let id = &p.identity;
    let frame = ramp(&[[0.05, 0.05, 0.05], [0.30, 0.15, 0.05], [0.05, 0.08, 0.30]], p.nuisance.frame_tone);
    let (hw, hh) = (id.eye_rx + 0.04, id.eye_ry + 0.035);
    let yc = id.eye_y + 0.005;
    let bar_y = id.eye_y - 0.01;
    let mut out = Vec::new();
    for side in [-1.0, 1.0] {
        let xc = 0.5 + side * id.eye_spacing;
        let (x0, x1) = (xc - hw, xc + hw);
        let (y0, y1) = (yc - hh, yc + hh);
        out.push(Paint { shape: Shape::Rect { x0, y0, x1, y1 }, color: [0.15, 0.15, 0.30], alpha: 0.3 });
        out.push(paint(Shape::Frame { x0, y0, x1, y1, t: 0.028 }, frame));
        let outer = if side < 0.0 { x0 } else { x1 };
        out.push(paint(
            Shape::Capsule { ax: outer, ay: bar_y, bx: 0.5 + side * (id.face_rx - 0.005), by: bar_y, r: 0.01 },
            frame,
        ));
    }
    let inner = id.eye_spacing - hw;
    out.push(paint(Shape::Capsule { ax: 0.5 - inner, ay: bar_y, bx: 0.5 + inner, by: bar_y, r: 0.012 }, frame));
    out
}

/// An `[3,S,S]` image (row-major planes) and one `[S,S]` mask per local
/// attribute, all in `f64`.
pub struct Raster {
    pub size: usize,
    pub image: Vec<f64>,
    pub masks: [Vec<f64>; 2],
}

/// Samples covering pixel `(row, col)`, in `[0,1]` coordinates.
fn subsamples(size: usize, row: usize, col: usize) -> impl Iterator<Item = (f64, f64)> {
    let n = SUPERSAMPLE;
    let s = size as f64;
    (0..n * n).map(move |k| {
        let (a, b) = (k / n, k % n);
        let u = (col as f64 + (b as f64 + 0.5) / n as f64) / s;
        let v = (row as f64 + (a as f64 + 0.5) / n as f64) / s;
        (u, v)
    })
}

fn overlaps(shape: &Shape, size: usize, row: usize, col: usize) -> bool {
    let s = size as f64;
    let (u0, v0, u1, v1) = shape.bbox();
    let (pu0, pv0) = (col as f64 / s, row as f64 / s);
    u1 >= pu0 && u0 <= pu0 + 1.0 / s && v1 >= pv0 && v0 <= pv0 + 1.0 / s
}

/// Pixels with at least one sample inside any of `shapes`, dilated by
/// `margin` in the Chebyshev metric.
fn region_mask(shapes: &[&Shape], size: usize, margin: usize) -> Vec<f64> {
    let mut hit = vec![false; size * size];
    for row in 0..size {
        for col in 0..size {
            let near: Vec<&Shape> = shapes.iter().copied().filter(|s| overlaps(s, size, row, col)).collect();
            if near.is_empty() {
                continue;
            }
            hit[row * size + col] = subsamples(size, row, col).any(|(u, v)| near.iter().any(|s| s.contains(u, v)));
        }
    }
    let mut out = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            let r0 = row.saturating_sub(margin);
            let r1 = (row + margin).min(size - 1);
            let c0 = col.saturating_sub(margin);
            let c1 = (col + margin).min(size - 1);
            if (r0..=r1).any(|r| (c0..=c1).any(|c| hit[r * size + c])) {
                out[row * size + col] = 1.0;
            }
        }
    }
    out
}

pub fn render(size: usize, params: &FaceParams, attrs: &Attributes) -> Result<Raster> {
    check_size(size)?;
    let mut paints = base_paints(params, attrs);
    paints.extend(mouth_paints(&params.identity, attrs.get(Attribute::MouthOpen)));
    if attrs.get(Attribute::Glasses) {
        paints.extend(glasses_paints(params));
    }

    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in 0..size {
        for col in 0..size {
            let near: Vec<&Paint> = paints.iter().filter(|p| overlaps(&p.shape, size, row, col)).collect();
            let mut acc = [0.0; 3];
            for (u, v) in subsamples(size, row, col) {
                let mut c = [0.0; 3];
                for p in &near {
                    if p.shape.contains(u, v) {
                        c = lerp(c, p.color, p.alpha);
                    }
                }
                for ch in 0..3 {
                    acc[ch] += c[ch] * weight;
                }
            }
            for ch in 0..3 {
                image[ch * plane + row * size + col] = (acc[ch] * params.nuisance.brightness).clamp(0.0, 1.0);
            }
        }
    }

    let margin = mask_margin(size);
    let glasses = glasses_paints(params);
    let glasses_mask = region_mask(&glasses.iter().map(|p| &p.shape).collect::<Vec<_>>(), size, margin);
    let mouth: Vec<Paint> = [false, true].into_iter().flat_map(|o| mouth_paints(&params.identity, o)).collect();
    let mouth_mask = region_mask(&mouth.iter().map(|p| &p.shape).collect::<Vec<_>>(), size, margin);
    Ok(Raster { size, image, masks: [glasses_mask, mouth_mask] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FaceParams { identity: IdentityParams::sample(&mut rng), nuisance: Nuisance::sample(&mut rng) }
    }

    #[test]
    fn margin_scales_with_size() {
        assert_eq!(SUPPORTED_SIZES.map(mask_margin), [1, 2, 4, 8]);
        assert!(check_size(48).is_err());
    }

    #[test]
    fn ramp_hits_its_stops() {
        let stops = [[0.0; 3], [1.0; 3], [0.5; 3]];
        assert_eq!(ramp(&stops, 0.0), [0.0; 3]);
        assert_eq!(ramp(&stops, 0.5), [1.0; 3]);
        assert_eq!(ramp(&stops, 1.0), [0.5; 3]);
    }

    #[test]
    fn bboxes_cover_shapes() {
        let p = params(3);
        let mut paints = base_paints(&p, &Attributes([true; 4]));
        paints.extend(glasses_paints(&p));
        paints.extend(mouth_paints(&p.identity, true));
        paints.extend(mouth_paints(&p.identity, false));
        let n = 200;
        for paint in &paints {
            let (u0, v0, u1, v1) = paint.shape.bbox();
            for i in 0..n {
                for j in 0..n {
                    let (u, v) = (j as f64 / n as f64, i as f64 / n as f64);
                    if paint.shape.contains(u, v) {
                        assert!(u >= u0 && u <= u1 && v >= v0 && v <= v1, "{:?}", paint.shape);
                    }
                }
            }
        }
    }

    #[test]
    fn masks_are_nonempty_and_partial() {
        for size in SUPPORTED_SIZES {
            let r = render(size, &params(1), &Attributes::default()).unwrap();
            for m in &r.masks {
                let on = m.iter().filter(|&&v| v == 1.0).count();
                assert!(on > 0 && on < size * size / 3, "size {size}: {on}");
            }
        }
    }

    #[test]
    fn glyphs_are_visible() {
        let p = params(2);
        let plain = render(32, &p, &Attributes::default()).unwrap();
        for a in Attribute::LOCAL {
            let r = render(32, &p, &Attributes::default().with(a, true)).unwrap();
            let changed = plain.image.iter().zip(&r.image).filter(|(x, y)| (*x - *y).abs() > 0.05).count();
            assert!(changed >= 10, "{a}: {changed}");
        }
    }
}
