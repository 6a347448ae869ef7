//! Resolution alignment of semantic features to depth-feature grids, plus
//! image-side preprocessing.
//!
//! The semantic encoder and the depth encoder produce token grids of
//! different sizes; before fusion the semantic grid is bilinearly resized to
//! twice the depth grid and then 2×2 max pooled, which lands exactly on the
//! depth grid. Interpolation uses the align-corners convention: corner
//! samples map to corner samples, so hand-derived expectations are exact.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Token grid of shape (h·w)×c, row-major over the grid.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    data: Tensor,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Parameter(format!(
                "feature map dimensions must be at least 1, got {h}×{w}×{c}"
            )));
        }
        let data = Tensor::new(vec![h * w, c], values)?;
        Ok(FeatureMap { h, w, data })
    }

    pub fn from_tensor(h: usize, w: usize, data: Tensor) -> Result<Self> {
        if data.shape().len() != 2 || data.shape()[0] != h * w {
            return Err(Error::Dimension(format!(
                "tensor shape {:?} does not match a {h}×{w} token grid",
                data.shape()
            )));
        }
        Ok(FeatureMap { h, w, data })
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        FeatureMap {
            h,
            w,
            data: Tensor::new(vec![h * w, c], vec![value; h * w * c]).expect("constant map"),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    /// Value of channel `c` at grid position (y, x).
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data.data()[(y * self.w + x) * self.channels() + c]
    }
}

/// Align-corners source coordinate of output sample `t` when resampling
/// `source` samples to `target` samples. A single output sample reads the
/// first input sample.
pub(crate) fn src_coord(t: usize, target: usize, source: usize) -> f64 {
    if target <= 1 {
        0.0
    } else {
        t as f64 * (source - 1) as f64 / (target - 1) as f64
    }
}

/// Raw align-corners bilinear resampling of an h×w×c row-major,
/// channel-minor grid. Shared by the eager path and the recorded graph op.
pub(crate) fn bilinear_raw(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    th: usize,
    tw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; th * tw * c];
    for ty in 0..th {
        let sy = src_coord(ty, th, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..tw {
            let sx = src_coord(tx, tw, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let corners = [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ];
            let orow = &mut out[(ty * tw + tx) * c..(ty * tw + tx + 1) * c];
            for (pos, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                let irow = &src[pos * c..(pos + 1) * c];
                for ch in 0..c {
                    orow[ch] += wgt * irow[ch];
                }
            }
        }
    }
    out
}

/// Per-channel align-corners bilinear interpolation to an h_t×w_t grid.
pub fn bilinear_resize(f: &FeatureMap, h_t: usize, w_t: usize) -> Result<FeatureMap> {
    if h_t == 0 || w_t == 0 {
        return Err(Error::Parameter(format!(
            "target grid must be at least 1×1, got {h_t}×{w_t}"
        )));
    }
    let (h, w) = f.grid();
    let c = f.channels();
    let out = bilinear_raw(f.values(), h, w, c, h_t, w_t);
    FeatureMap::new(h_t, w_t, c, out)
}

/// Per-channel max over non-overlapping 2×2 windows. Requires even extents.
pub fn max_pool_2x2(f: &FeatureMap) -> Result<FeatureMap> {
    let (h, w) = f.grid();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Parameter(format!(
            "max_pool_2x2 requires even grid extents, got {h}×{w}"
        )));
    }
    let c = f.channels();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = f.at(2 * oy + dy, 2 * ox + dx, ch);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    FeatureMap::new(oh, ow, c, out)
}

/// Resolution-align a semantic feature map to a depth-feature grid:
/// bilinear resize to twice the target, then 2×2 max pooling. Computed once
/// per sample and shared by all gates.
pub fn align_semantic(f_s: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap> {
    let (h, w) = target;
    let doubled = bilinear_resize(f_s, 2 * h, 2 * w)?;
    max_pool_2x2(&doubled)
}

/// Image raster, h×w×c, row-major, channel-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Parameter(format!(
                "raster dimensions must be at least 1, got {h}×{w}×{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::Dimension(format!(
                "raster {h}×{w}×{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Raster { h, w, c, data })
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Resize so the shorter side equals `s` (aspect preserved, long side
/// rounded half-up and floored at `s`), then crop a random s×s window with
/// offsets drawn from `rng`: row offset first, then column offset.
pub fn preprocess_image(img: &Raster, s: usize, rng: &mut Prng) -> Result<Raster> {
    if s == 0 {
        return Err(Error::Parameter("crop size must be at least 1".into()));
    }
    let (rh, rw) = if img.h <= img.w {
        let long = round_half_up(img.w as f64 * s as f64 / img.h as f64).max(s);
        (s, long)
    } else {
        let long = round_half_up(img.h as f64 * s as f64 / img.w as f64).max(s);
        (long, s)
    };
    let resized = bilinear_raw(&img.data, img.h, img.w, img.c, rh, rw);
    let oy = rng.below((rh - s + 1) as u64) as usize;
    let ox = rng.below((rw - s + 1) as u64) as usize;
    let mut out = vec![0.0; s * s * img.c];
    for y in 0..s {
        for x in 0..s {
            for ch in 0..img.c {
                out[(y * s + x) * img.c + ch] = resized[((y + oy) * rw + (x + ox)) * img.c + ch];
            }
        }
    }
    Raster::new(s, s, img.c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from_rows(rows: &[&[f64]]) -> FeatureMap {
        let h = rows.len();
        let w = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMap::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn resize_constant_stays_constant() {
        let f = FeatureMap::constant(3, 5, 2, 4.25);
        let r = bilinear_resize(&f, 7, 2).unwrap();
        assert!(r.values().iter().all(|v| (v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn resize_to_same_grid_is_identity() {
        let mut rng = Prng::new(11);
        let f =
            FeatureMap::new(4, 6, 3, (0..72).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let r = bilinear_resize(&f, 4, 6).unwrap();
        for (a, b) in f.values().iter().zip(r.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resize_2x2_to_3x3_closed_form() {
        let f = map_from_rows(&[&[0.0, 1.0], &[2.0, 3.0]]);
        let r = bilinear_resize(&f, 3, 3).unwrap();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in r.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_stays_within_input_range() {
        let mut rng = Prng::new(5);
        for _ in 0..20 {
            let (h, w) = (2 + rng.below(5) as usize, 2 + rng.below(5) as usize);
            let f = FeatureMap::new(
                h,
                w,
                2,
                (0..h * w * 2).map(|_| rng.uniform(-3.0, 3.0)).collect(),
            )
            .unwrap();
            let (th, tw) = (1 + rng.below(9) as usize, 1 + rng.below(9) as usize);
            let r = bilinear_resize(&f, th, tw).unwrap();
            for ch in 0..2 {
                let vals = |m: &FeatureMap| -> Vec<f64> {
                    (0..m.tokens()).map(|t| m.values()[t * 2 + ch]).collect()
                };
                let src = vals(&f);
                let dst = vals(&r);
                let (lo, hi) = src
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                for v in dst {
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let f = FeatureMap::constant(2, 2, 1, 0.0);
        assert!(matches!(
            bilinear_resize(&f, 0, 3),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn max_pool_window() {
        let f = map_from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = max_pool_2x2(&f).unwrap();
        assert_eq!(p.grid(), (1, 1));
        assert_eq!(p.values(), &[4.0]);
    }

    #[test]
    fn max_pool_constant() {
        let f = FeatureMap::constant(4, 6, 3, -1.5);
        let p = max_pool_2x2(&f).unwrap();
        assert_eq!(p.grid(), (2, 3));
        assert!(p.values().iter().all(|v| *v == -1.5));
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        let f = FeatureMap::constant(3, 4, 1, 0.0);
        assert!(matches!(max_pool_2x2(&f), Err(Error::Parameter(_))));
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let mut rng = Prng::new(21);
        let f =
            FeatureMap::new(4, 4, 2, (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let p = max_pool_2x2(&f).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for ch in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(f.at(2 * oy + dy, 2 * ox + dx, ch));
                        }
                    }
                    assert_eq!(p.at(oy, ox, ch), best);
                }
            }
        }
    }

    #[test]
    fn align_semantic_hits_requested_grid() {
        let mut rng = Prng::new(33);
        for _ in 0..10 {
            let (h, w) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
            let (sh, sw) = (1 + rng.below(9) as usize, 1 + rng.below(9) as usize);
            let f = FeatureMap::new(
                sh,
                sw,
                2,
                (0..sh * sw * 2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let a = align_semantic(&f, (h, w)).unwrap();
            assert_eq!(a.grid(), (h, w));
            assert_eq!(a.channels(), 2);
        }
    }

    #[test]
    fn align_semantic_constant_passthrough() {
        let f = FeatureMap::constant(4, 4, 2, 0.75);
        let a = align_semantic(&f, (4, 4)).unwrap();
        assert_eq!(a.grid(), (4, 4));
        assert!(a.values().iter().all(|v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn align_semantic_dominates_direct_resize_when_source_is_double() {
        // An 8×8 source resized to 2× a 4×4 target is the identity, so the
        // pooled fine grid nests the coarse samples exactly.
        let mut rng = Prng::new(44);
        let f =
            FeatureMap::new(8, 8, 1, (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let aligned = align_semantic(&f, (4, 4)).unwrap();
        let direct = bilinear_resize(&f, 4, 4).unwrap();
        for (a, d) in aligned.values().iter().zip(direct.values()) {
            assert!(a + 1e-12 >= *d, "{a} < {d}");
        }
    }

    #[test]
    fn align_semantic_dominates_on_nesting_targets() {
        // Target extents 1 and 2 are the cases where the coarse align-corners
        // grid is a subset of the doubled grid.
        let mut rng = Prng::new(45);
        for target in [(1usize, 1usize), (2, 2), (1, 2), (2, 1)] {
            let (sh, sw) = (3 + rng.below(5) as usize, 3 + rng.below(5) as usize);
            let f = FeatureMap::new(
                sh,
                sw,
                1,
                (0..sh * sw).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let aligned = align_semantic(&f, target).unwrap();
            let direct = bilinear_resize(&f, target.0, target.1).unwrap();
            for (a, d) in aligned.values().iter().zip(direct.values()) {
                assert!(a + 1e-12 >= *d, "{a} < {d}");
            }
        }
    }

    #[test]
    fn align_semantic_matches_composed_oracle() {
        // Independent reimplementation: scalar bilinear sampling per channel
        // followed by an explicit window max.
        let mut rng = Prng::new(55);
        let f =
            FeatureMap::new(6, 6, 2, (0..72).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let target = (3usize, 3usize);
        let got = align_semantic(&f, target).unwrap();

        let sample = |ch: usize, sy: f64, sx: f64| -> f64 {
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(5);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(5);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            f.at(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                + f.at(y0, x1, ch) * (1.0 - fy) * fx
                + f.at(y1, x0, ch) * fy * (1.0 - fx)
                + f.at(y1, x1, ch) * fy * fx
        };
        let fine = |ch: usize, y: usize, x: usize| -> f64 {
            sample(ch, y as f64 * 5.0 / 5.0, x as f64 * 5.0 / 5.0)
        };
        for oy in 0..target.0 {
            for ox in 0..target.1 {
                for ch in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(fine(ch, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    let got_v = got.at(oy, ox, ch);
                    assert!((got_v - best).abs() < 1e-12, "{got_v} vs {best}");
                }
            }
        }
    }

    #[test]
    fn preprocess_square_input_is_pure_resize() {
        let mut rng = Prng::new(66);
        let img = Raster::new(6, 6, 1, (0..36).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let out = preprocess_image(&img, 4, &mut Prng::new(0)).unwrap();
        let reference = bilinear_raw(&img.data, 6, 6, 1, 4, 4);
        assert_eq!(out.data, reference);
    }

    #[test]
    fn preprocess_constant_image() {
        let img = Raster::new(5, 9, 2, vec![0.3; 90]).unwrap();
        let out = preprocess_image(&img, 3, &mut Prng::new(1)).unwrap();
        assert_eq!((out.h, out.w, out.c), (3, 3, 2));
        assert!(out.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn preprocess_is_seed_deterministic() {
        // 10×20 at s=4: shorter side 10 scales by 0.4, long side lands on 8,
        // so the crop is an x-offset into a 4×8 intermediate.
        let mut rng = Prng::new(77);
        let img =
            Raster::new(10, 20, 1, (0..200).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let a = preprocess_image(&img, 4, &mut Prng::new(123)).unwrap();
        let b = preprocess_image(&img, 4, &mut Prng::new(123)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.h, a.w), (4, 4));

        let resized = bilinear_raw(&img.data, 10, 20, 1, 4, 8);
        let mut crop_rng = Prng::new(123);
        let oy = crop_rng.below(1) as usize;
        let ox = crop_rng.below(5) as usize;
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(a.at(y, x, 0), resized[(y + oy) * 8 + (x + ox)]);
            }
        }
    }

    #[test]
    fn preprocess_rounds_long_side_half_up() {
        // 2×3 at s=3: long side 4.5 rounds half-up to 5, so the crop window
        // has horizontal freedom over a 3×5 intermediate image.
        let mut rng = Prng::new(88);
        let img = Raster::new(2, 3, 1, (0..6).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let resized = bilinear_raw(&img.data, 2, 3, 1, 3, 5);
        let mut crop_rng = Prng::new(9);
        let oy = crop_rng.below(1) as usize;
        let ox = crop_rng.below(3) as usize;
        let out = preprocess_image(&img, 3, &mut Prng::new(9)).unwrap();
        assert_eq!((out.h, out.w), (3, 3));
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.at(y, x, 0), resized[(y + oy) * 5 + (x + ox)]);
            }
        }
    }
}
