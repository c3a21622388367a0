use std::ops::Range;
use std::sync::Arc;

/// Contiguous class blocks of a label-sorted sample list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl ClassLayout {
    pub fn from_sizes(sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        ClassLayout { sizes, offsets }
    }

    /// Returns `None` unless equal labels are contiguous and appear in
    /// ascending order `0, 1, ..., c-1`.
    pub fn from_sorted_labels(labels: &[usize]) -> Option<Self> {
        let mut sizes: Vec<usize> = Vec::new();
        for &l in labels {
            match l.cmp(&sizes.len()) {
                std::cmp::Ordering::Less if l + 1 == sizes.len() => *sizes.last_mut()? += 1,
                std::cmp::Ordering::Equal => sizes.push(1),
                _ => return None,
            }
        }
        Some(Self::from_sizes(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_classes(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_samples(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, class: usize) -> Range<usize> {
        self.offsets[class]..self.offsets[class + 1]
    }

    /// Row ranges of every class, in class order.
    pub fn blocks(&self) -> Arc<[Range<usize>]> {
        (0..self.num_classes()).map(|c| self.range(c)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    }

    /// `N x N` 0/1 mask of trainable self-expressive coefficients: same class
    /// and off the diagonal.
    pub fn csse_mask(&self) -> Arc<[f64]> {
        let n = self.num_samples();
        let mut m = vec![0.0; n * n];
        for c in 0..self.num_classes() {
            let r = self.range(c);
            for a in r.clone() {
                for b in r.clone() {
                    if a != b {
                        m[a * n + b] = 1.0;
                    }
                }
            }
        }
        m.into()
    }

    /// `N x N` 0/1 mask selecting pairs `(a, b)` with `class(a) < class(b)`.
    pub fn cross_class_upper_mask(&self) -> Arc<[f64]> {
        let n = self.num_samples();
        let mut m = vec![0.0; n * n];
        for ci in 0..self.num_classes() {
            for a in self.range(ci) {
                let start = self.offsets[ci + 1];
                m[a * n + start..a * n + n].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        m.into()
    }

    pub fn trainable_csse_entries(&self) -> usize {
        self.sizes.iter().map(|&n| n * n - n).sum()
    }
}
