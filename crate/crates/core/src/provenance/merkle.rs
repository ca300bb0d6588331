//! Salted Merkle tree over fixed-size chunks, split the way RFC 6962 splits
//! (left subtree is the largest power of two below `n`).

use sha2::{Digest, Sha256};

pub type Hash = [u8; 32];

pub fn leaf_hash(salt: &[u8], chunk: &[u8]) -> Hash {
    let mut h = Sha256::new();
    h.update([0x00]);
    h.update(salt);
    h.update(chunk);
    h.finalize().into()
}

fn node_hash(left: &Hash, right: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update([0x01]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

fn split_point(n: usize) -> usize {
    debug_assert!(n > 1);
    let mut k = 1;
    while k * 2 < n {
        k *= 2;
    }
    k
}

pub fn root(leaves: &[Hash]) -> Hash {
    match leaves.len() {
        0 => Sha256::digest([]).into(),
        1 => leaves[0],
        n => {
            let k = split_point(n);
            node_hash(&root(&leaves[..k]), &root(&leaves[k..]))
        }
    }
}

/// Sibling hashes from the leaf upwards.
pub fn path(index: usize, leaves: &[Hash]) -> Vec<Hash> {
    let n = leaves.len();
    if n <= 1 {
        return Vec::new();
    }
    let k = split_point(n);
    if index < k {
        let mut p = path(index, &leaves[..k]);
        p.push(root(&leaves[k..]));
        p
    } else {
        let mut p = path(index - k, &leaves[k..]);
        p.push(root(&leaves[..k]));
        p
    }
}

/// Recomputes the root implied by `leaf` sitting at `index` of `size` leaves.
/// `None` if the path length does not fit the tree shape.
pub fn root_from_path(index: usize, size: usize, leaf: Hash, path: &[Hash]) -> Option<Hash> {
    if index >= size {
        return None;
    }
    if size == 1 {
        return path.is_empty().then_some(leaf);
    }
    let (last, rest) = path.split_last()?;
    let k = split_point(size);
    if index < k {
        Some(node_hash(&root_from_path(index, k, leaf, rest)?, last))
    } else {
        Some(node_hash(last, &root_from_path(index - k, size - k, leaf, rest)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(n: usize) -> Vec<Hash> {
        (0..n).map(|i| leaf_hash(&[i as u8], b"chunk")).collect()
    }

    #[test]
    fn every_path_verifies_for_all_small_sizes() {
        for n in 1..40 {
            let ls = leaves(n);
            let r = root(&ls);
            for i in 0..n {
                let p = path(i, &ls);
                assert_eq!(root_from_path(i, n, ls[i], &p), Some(r), "n={n} i={i}");
                if n > 1 {
                    let wrong = (i + 1) % n;
                    assert_ne!(root_from_path(wrong, n, ls[i], &p), Some(r));
                }
            }
        }
    }

    #[test]
    fn path_length_must_match_shape() {
        let ls = leaves(5);
        let mut p = path(2, &ls);
        p.push([0; 32]);
        assert_ne!(root_from_path(2, 5, ls[2], &p), Some(root(&ls)));
        assert_eq!(root_from_path(7, 5, ls[2], &p), None);
    }
}
