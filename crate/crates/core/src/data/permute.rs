//! Pixel permutations for the sequential-task benchmark.

use crate::element::Element;
use crate::rng::{SeedPool, StreamKind};
use crate::tensor::Tensor;

/// Task 0 is the identity; later tasks are uniformly random bijections over
/// the pixel indices, each derived from its own stream so a permutation can
/// be regenerated at any time from (seed, task id).
pub fn make_permutation_sequence(num_tasks: usize, dim: usize, pool: &SeedPool) -> Vec<Vec<usize>> {
    (0..num_tasks)
        .map(|task| {
            let mut perm: Vec<usize> = (0..dim).collect();
            if task > 0 {
                let mut rng = pool.stream(StreamKind::Permutation, task as u64);
                rng.shuffle(&mut perm);
            }
            perm
        })
        .collect()
}

/// Applies a pixel permutation to every row of `[n, dim]` images:
/// `out[i][j] = images[i][perm[j]]`.
pub fn apply_permutation<E: Element>(images: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let (n, dim) = images.dims2().expect("images are rank 2");
    assert_eq!(dim, perm.len());
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let row = &images.data()[i * dim..(i + 1) * dim];
        data.extend(perm.iter().map(|&src| row[src]));
    }
    Tensor::new(vec![n, dim], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn invert(perm: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; perm.len()];
        for (dst, &src) in perm.iter().enumerate() {
            inv[src] = dst;
        }
        inv
    }

    #[test]
    fn task_zero_is_identity() {
        let pool = SeedPool::new(8);
        let perms = make_permutation_sequence(3, 16, &pool);
        assert_eq!(perms[0], (0..16).collect::<Vec<_>>());
        assert_ne!(perms[1], perms[0]);
        assert_ne!(perms[2], perms[1]);
    }

    #[test]
    fn permutations_are_bijections() {
        let pool = SeedPool::new(8);
        for perm in make_permutation_sequence(4, 64, &pool) {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn permutation_then_inverse_is_identity() {
        let pool = SeedPool::new(8);
        let perm = &make_permutation_sequence(2, 9, &pool)[1];
        let images = Tensor::new(vec![2, 9], (0..18).map(|x| x as f32).collect()).unwrap();
        let permuted = apply_permutation(&images, perm);
        let restored = apply_permutation(&permuted, &invert(perm));
        assert!(restored.bitwise_eq(&images));
    }

    #[test]
    fn different_seeds_give_different_permutations() {
        let a = &make_permutation_sequence(2, 784, &SeedPool::new(1))[1];
        let b = &make_permutation_sequence(2, 784, &SeedPool::new(2))[1];
        assert_ne!(a, b);
    }
}
