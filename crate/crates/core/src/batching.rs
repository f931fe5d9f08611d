use rand::seq::SliceRandom;

use crate::rng::Rng;

/// Splits `0..n` into consecutive batches after a seeded shuffle.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Number of batches [`shuffled_batches`] produces.
pub fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn batches_cover_every_index_once() {
        let b = shuffled_batches(10, 4, &mut seeded(1));
        assert_eq!(b.len(), batch_count(10, 4));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
