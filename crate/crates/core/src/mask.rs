use crate::tensor::Tensor;

/// Row-major binary raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    /// Out-of-range coordinates read as unset.
    pub fn contains(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width && self.get(r as usize, c as usize)
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Chebyshev (square) dilation, clipped to the raster.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let rad = radius as isize;
        let mut out = Mask::new(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                for dr in -rad..=rad {
                    for dc in -rad..=rad {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < self.height && (cc as usize) < self.width {
                            out.set(rr as usize, cc as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        self.bits.iter_mut().zip(&other.bits).for_each(|(a, b)| *a |= *b);
    }

    /// Inclusive (row_min, col_min, row_max, col_max) of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims")
    }

    /// Pixels strictly above 0.5 are set. Returns `None` unless `t` is H×W.
    pub fn from_tensor(t: &Tensor) -> Option<Mask> {
        let s = t.shape();
        if s.len() != 2 {
            return None;
        }
        Some(Mask {
            height: s[0],
            width: s[1],
            bits: t.data().iter().map(|&v| v > 0.5).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_grows_a_point_into_a_square() {
        let mut m = Mask::new(7, 7);
        m.set(3, 3, true);
        assert_eq!(m.dilate(1).count(), 9);
        assert_eq!(m.dilate(2).count(), 25);
        let mut corner = Mask::new(4, 4);
        corner.set(0, 0, true);
        assert_eq!(corner.dilate(1).count(), 4);
    }

    #[test]
    fn bounding_box_and_complement() {
        let m = Mask::from_fn(5, 6, |r, c| (1..=2).contains(&r) && (2..=4).contains(&c));
        assert_eq!(m.bounding_box(), Some((1, 2, 2, 4)));
        assert_eq!(m.complement().count(), 30 - 6);
        assert!(!m.intersects(&m.complement()));
        assert_eq!(Mask::new(3, 3).bounding_box(), None);
    }
}
