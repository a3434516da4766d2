//! Binary dilation with a square structuring element.

use super::BinaryMask;

/// Radius used to grow a segmented hole before recovery, assuming 1 mm
/// pixels (a 3 mm element).
pub const DEFAULT_DILATE_RADIUS: usize = 3;

/// Which side of a mask to grow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Hole,
    Valid,
}

/// Grows the `true` set of a row-major `width x height` indicator by a
/// `(2 radius + 1)`-sided square. Separable: a row pass then a column pass.
pub fn dilate_raw(region: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    assert_eq!(region.len(), width * height, "indicator length");
    if radius == 0 || region.is_empty() {
        return region.to_vec();
    }
    let mut rows = vec![false; region.len()];
    for y in 0..height {
        let line = &region[y * width..(y + 1) * width];
        // distance to the last `true` seen scanning left, then right
        let out = &mut rows[y * width..(y + 1) * width];
        let mut last: Option<usize> = None;
        for x in 0..width {
            if line[x] {
                last = Some(x);
            }
            out[x] = last.is_some_and(|l| x - l <= radius);
        }
        last = None;
        for x in (0..width).rev() {
            if line[x] {
                last = Some(x);
            }
            out[x] |= last.is_some_and(|l| l - x <= radius);
        }
    }
    let mut out = vec![false; region.len()];
    for x in 0..width {
        let mut last: Option<usize> = None;
        for y in 0..height {
            if rows[y * width + x] {
                last = Some(y);
            }
            out[y * width + x] = last.is_some_and(|l| y - l <= radius);
        }
        last = None;
        for y in (0..height).rev() {
            if rows[y * width + x] {
                last = Some(y);
            }
            out[y * width + x] |= last.is_some_and(|l| l - y <= radius);
        }
    }
    out
}

/// Grows `region` of `mask`; the other region shrinks by the same pixels.
pub fn dilate(mask: &BinaryMask, radius: usize, region: Region) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let valid = match region {
        Region::Hole => dilate_raw(&mask.holes(), w, h, radius)
            .into_iter()
            .map(|hole| !hole)
            .collect(),
        Region::Valid => dilate_raw(mask.valid(), w, h, radius),
    };
    BinaryMask::new(w, h, valid).expect("extents preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn naive(region: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                for (sy, sx) in (0..h).flat_map(|sy| (0..w).map(move |sx| (sy, sx))) {
                    if region[sy * w + sx] && sy.abs_diff(y) <= r && sx.abs_diff(x) <= r {
                        out[y * w + x] = true;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_hole_grows_to_block() {
        let mut valid = vec![true; 25];
        valid[12] = false;
        let m = BinaryMask::new(5, 5, valid).unwrap();
        let d = dilate(&m, 1, Region::Hole);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&x) && (1..=3).contains(&y);
                assert_eq!(d.is_valid(x, y), !inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn empty_hole_set_is_unchanged() {
        let m = BinaryMask::all_valid(6, 4);
        assert_eq!(dilate(&m, 3, Region::Hole), m);
        assert_eq!(dilate(&m, 0, Region::Valid), m);
    }

    #[test]
    fn matches_naive_and_composes() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..40 {
            let w = rng.random_range(1..12);
            let h = rng.random_range(1..12);
            let r: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.1)).collect();
            for radius in 0..4 {
                assert_eq!(dilate_raw(&r, w, h, radius), naive(&r, w, h, radius));
            }
            let twice = dilate_raw(&dilate_raw(&r, w, h, 1), w, h, 1);
            assert_eq!(twice, dilate_raw(&r, w, h, 2));
        }
    }

    #[test]
    fn valid_region_grows_into_holes() {
        let m = BinaryMask::new(3, 1, vec![true, false, false]).unwrap();
        assert_eq!(dilate(&m, 1, Region::Valid).valid(), &[true, true, false]);
    }
}
