use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

pub fn flip_horizontal<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    a.slice(s![.., ..;-1]).to_owned()
}

pub fn flip_vertical<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    a.slice(s![..;-1, ..]).to_owned()
}

/// Quarter turn counter-clockwise.
pub fn rotate90<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    a.t().slice(s![..;-1, ..]).to_owned()
}

/// A flip/rotation drawn from the dihedral group of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    pub fn apply2<T: Clone>(&self, a: &Array2<T>) -> Array2<T> {
        let mut out = a.clone();
        if self.flip_h {
            out = flip_horizontal(out.view());
        }
        if self.flip_v {
            out = flip_vertical(out.view());
        }
        for _ in 0..self.quarter_turns {
            out = rotate90(out.view());
        }
        out
    }

    pub fn apply3<T: Clone>(&self, a: &Array3<T>) -> Array3<T> {
        let planes: Vec<Array2<T>> = a
            .axis_iter(Axis(0))
            .map(|plane| self.apply2(&plane.to_owned()))
            .collect();
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        ndarray::stack(Axis(0), &views).expect("planes share a shape")
    }
}

fn rotation_radius(p: usize) -> f64 {
    (p as f64) * std::f64::consts::FRAC_1_SQRT_2 + 1.0
}

pub(super) fn fits_rotation(h: usize, w: usize, p: usize) -> bool {
    let need = 2.0 * rotation_radius(p) + 1.0;
    (h as f64) > need && (w as f64) > need
}

/// Crops a `p × p` patch rotated by `angle` around a random centre. The image
/// and weight map are sampled bilinearly, the label by nearest neighbour.
pub(super) fn rotated_crop(
    image: &Array3<f32>,
    label: &Array2<u8>,
    wmap: &Array2<f32>,
    p: usize,
    angle: f64,
    rng: &mut impl Rng,
) -> (Array3<f32>, Array2<u8>, Array2<f32>) {
    let (_, h, w) = image.dim();
    let r = rotation_radius(p);
    let cy = rng.gen_range(r..(h as f64 - 1.0 - r));
    let cx = rng.gen_range(r..(w as f64 - 1.0 - r));
    let (sin, cos) = angle.sin_cos();
    let half = (p as f64 - 1.0) / 2.0;
    let src = |y: usize, x: usize| {
        let dy = y as f64 - half;
        let dx = x as f64 - half;
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    };
    let bilinear = |plane: ArrayView2<f32>, sy: f64, sx: f64| {
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let img = Array3::from_shape_fn((3, p, p), |(c, y, x)| {
        let (sy, sx) = src(y, x);
        bilinear(image.index_axis(Axis(0), c), sy, sx)
    });
    let lab = Array2::from_shape_fn((p, p), |(y, x)| {
        let (sy, sx) = src(y, x);
        label[[sy.round() as usize, sx.round() as usize]]
    });
    let wt = Array2::from_shape_fn((p, p), |(y, x)| {
        let (sy, sx) = src(y, x);
        bilinear(wmap.view(), sy, sx)
    });
    (img, lab, wt)
}
