use rand::seq::SliceRandom;
use rand::Rng;

/// Shuffles `0..n` and cuts it into consecutive batches of at most `batch`.
pub(crate) fn shuffled_batches<R: Rng + ?Sized>(
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Drops a trailing batch of one when batch statistics need at least two rows.
pub(crate) fn merge_singleton_tail(mut batches: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}
