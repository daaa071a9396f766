//! Indexing helpers for quantities defined per unordered pair {i, j} or
//! triangle {i, j, k} of image indices.
//!
//! Pairs are stored lexicographically: (0,1), (0,2), ..., (0,N-1), (1,2), ...
//! All synchronization matrices in this crate index their rows and columns by
//! this pair order.

/// Number of unordered pairs over `n` items.
pub fn pair_count(n: usize) -> usize {
    n * (n.saturating_sub(1)) / 2
}

/// Number of unordered triangles over `n` items.
pub fn triangle_count(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

/// Lexicographic index of the pair (i, j), i < j, among all pairs over `n`.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Iterate all pairs (i, j) with i < j < n in lexicographic order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Iterate all triangles (i, j, k) with i < j < k < n in lexicographic order.
pub fn triangles(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).flat_map(move |j| (j + 1..n).map(move |k| (i, j, k))))
}

/// A dense container with one value per unordered pair {i, j} over `n` items.
#[derive(Clone, Debug)]
pub struct PairVec<T> {
    n: usize,
    items: Vec<T>,
}

impl<T> PairVec<T> {
    /// Build by evaluating `f(i, j)` for every pair in lexicographic order.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut items = Vec::with_capacity(pair_count(n));
        for (i, j) in pairs(n) {
            items.push(f(i, j));
        }
        PairVec { n, items }
    }

    /// Wrap a vector already in lexicographic pair order.
    pub fn from_vec(n: usize, items: Vec<T>) -> crate::Result<Self> {
        if items.len() != pair_count(n) {
            return Err(crate::Error::SizeMismatch(format!(
                "expected {} pair entries for n={}, got {}",
                pair_count(n),
                n,
                items.len()
            )));
        }
        Ok(PairVec { n, items })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.items[pair_index(self.n, i, j)]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.items[pair_index(self.n, i, j)]
    }

    /// Entry by flat lexicographic pair index.
    pub fn by_index(&self, p: usize) -> &T {
        &self.items[p]
    }

    pub fn iter_pairs(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        pairs(self.n)
            .zip(self.items.iter())
            .map(|((i, j), t)| (i, j, t))
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> PairVec<U> {
        PairVec {
            n: self.n,
            items: pairs(self.n)
                .zip(self.items.iter())
                .map(|((i, j), t)| f(i, j, t))
                .collect(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.items
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_index_is_lexicographic() {
        let n = 7;
        for (expect, (i, j)) in pairs(n).enumerate() {
            assert_eq!(pair_index(n, i, j), expect);
        }
        assert_eq!(pairs(n).count(), pair_count(n));
    }

    #[test]
    fn triangle_enumeration_counts() {
        assert_eq!(triangles(5).count(), triangle_count(5));
        assert_eq!(triangle_count(3), 1);
        assert_eq!(triangle_count(2), 0);
    }

    #[test]
    fn pairvec_round_trip() {
        let pv = PairVec::from_fn(5, |i, j| (i, j));
        for (i, j, &(a, b)) in pv.iter_pairs() {
            assert_eq!((i, j), (a, b));
        }
        assert_eq!(*pv.get(1, 3), (1, 3));
    }

    proptest::proptest! {
        #[test]
        fn pair_index_bijective(n in 2usize..40, raw_i in 0usize..40, raw_j in 0usize..40) {
            let i = raw_i % n;
            let j = raw_j % n;
            proptest::prop_assume!(i != j);
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            let p = pair_index(n, a, b);
            proptest::prop_assert!(p < pair_count(n));
            let (ri, rj) = pairs(n).nth(p).unwrap();
            proptest::prop_assert_eq!((ri, rj), (a, b));
        }
    }
}
