//! Generate a few captioned shapes and a text stream, writing the images as PPM.

use qlip::imageio::write_image;
use qlip::syndata::{gen_pair_corpus_split, gen_text_corpus, sentences, Split};

fn main() -> qlip::Result<()> {
    let out = std::env::temp_dir().join("qlip-synthetic");
    std::fs::create_dir_all(&out)?;
    let corpus = gen_pair_corpus_split(6, 32, 7, Split::Train)?;
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let path = out.join(format!("pair{i}.ppm"));
        write_image(&path, &pair.image)?;
        println!("{} class {:2}  {}", path.display(), pair.label, corpus.vocab.decode(&pair.tokens));
    }
    let stream = gen_text_corpus(200, 7)?;
    for s in sentences(&corpus.vocab, &stream).iter().take(3) {
        println!("text: {}", corpus.vocab.decode(s));
    }
    Ok(())
}
