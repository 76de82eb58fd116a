//! Small end-to-end multimodal run: tokenize captioned images, pretrain a text
//! model, widen its vocabulary, train on mixed sequences and sample an image
//! from a caption.

use qlip::syndata::{gen_pair_corpus_split, gen_text_corpus, sentences, Split};
use qlip::tokcodec::{decode_tokens_to_image, TokenGrid};
use qlip::trainer::{run_stage1, TrainConfig};
use qlip::um3::{extend_vocab, generate, pretrain_lm, t2i_prompt, train_um3, visual_spans, EvalSets, GenConfig, LmConfig, Um3Config, Um3Sources};

fn main() -> qlip::Result<()> {
    let corpus = gen_pair_corpus_split(256, 16, 0, Split::Train)?;
    let stream = gen_text_corpus(20_000, 0)?;
    let tok_cfg = TrainConfig { total_steps: 200, warmup: 20, ..TrainConfig::toy_stage1() };
    let (tokenizer, _) = run_stage1(&tok_cfg, &corpus)?;

    let mut text = sentences(&corpus.vocab, &stream);
    let heldout = text.split_off(text.len() - 50);
    let sources = Um3Sources { text, ..Um3Sources::build(&tokenizer, &corpus, &stream)? };
    let eval = EvalSets::build(&sources, &heldout, 16, 0)?;

    let pre = Um3Config { total_steps: 300, eval_every: 100, ..Um3Config::toy_pretrain() };
    let (base, _) = pretrain_lm(LmConfig::small(sources.layout.text), &pre, &sources.text, &sources.specials, &heldout)?;
    let mixed = Um3Config { total_steps: 400, schedule: Um3Config::toy().schedule.with_calm_steps(200), eval_every: 200, ..Um3Config::toy() };
    let (lm, log) = train_um3(&mixed, extend_vocab(&base, &sources.layout)?, &sources, &eval)?;
    for (step, v) in log.series("eval_t2i_nll") {
        println!("step {step:>4}: held-out text-to-image nll {v:.3}");
    }

    let (caption, _) = &sources.pairs[0];
    let prompt = t2i_prompt(&sources.specials, caption);
    let gen = GenConfig { max_tokens: lm.cfg.max_len, stop_after_image: true, ..GenConfig::default() };
    let seq = generate(&lm, &sources.layout, &sources.specials, sources.n_visual, &prompt, &gen)?;
    let codes = visual_spans(&seq, &sources.layout, &sources.specials, sources.n_visual)?.remove(0);
    let side = tokenizer.cfg.grid_side();
    let grid = TokenGrid::new(side, side, tokenizer.cfg.code_bits as u8, codes.iter().map(|&c| c as u32).collect())?;
    let image = decode_tokens_to_image(&tokenizer, &grid)?;
    println!("caption: {}", corpus.vocab.decode(caption));
    println!("sampled codes {:?} -> {}x{} image", grid.ids, image.height, image.width);
    Ok(())
}
