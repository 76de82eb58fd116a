//! Text-only share of the mixed batches over the calm-down, and what a sampled
//! batch actually contains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qlip::um3::{draw_kind, mix_ratio, MixSchedule, SeqKind};

fn main() {
    let s = MixSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in [0, 2_500, 5_000, 7_500, 10_000, 20_000] {
        let mut counts = [0usize; 3];
        for _ in 0..4000 {
            counts[match draw_kind(t, &s, &mut rng) {
                SeqKind::Text => 0,
                SeqKind::ImageToText => 1,
                SeqKind::TextToImage => 2,
            }] += 1;
        }
        println!("t = {t:>6}: r(t) = {:.4}  drawn text/i2t/t2i = {counts:?}", mix_ratio(t, &s));
    }
}
