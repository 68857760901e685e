//! Synthetic multi-domain plain-text corpus for byte-level training, plus the
//! deterministic train/held-out split. Any UTF-8 text file works as a corpus;
//! the generator exists so the kit runs out of the box without external data.
//!
//! Three "domains" (prose, code-like lines, tabular records) are mixed at
//! paragraph granularity; heterogeneous structure gives routed experts
//! something to specialize on.

use crate::rng::{RngState, RngStream};

const SYLLABLES: &[&str] = &[
    "ba", "be", "bo", "da", "de", "di", "ka", "ke", "ko", "la", "le", "li", "lo", "ma", "me",
    "mi", "mo", "na", "ne", "no", "ra", "re", "ri", "ro", "sa", "se", "si", "so", "ta", "te",
    "ti", "to", "va", "ve", "vi", "zu", "ga", "gi", "pa", "po", "ru",
];

fn make_word(stream: &mut RngStream, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYLLABLES[stream.below(SYLLABLES.len())]);
    }
    w
}

/// Zipf-ish ranked word inventory for one prose dialect.
fn make_vocab(rng: &RngState, size: usize) -> Vec<String> {
    let mut stream = rng.stream();
    (0..size).map(|_| make_word(&mut stream, 1 + stream.below(3))).collect()
}

fn pick_zipf(stream: &mut RngStream, n: usize) -> usize {
    // Inverse-CDF of p(r) ~ 1/(r+1), cheap and heavy-headed.
    let u = stream.uniform();
    let h = ((n + 1) as f64).ln();
    ((u * h).exp() as usize).saturating_sub(1).min(n - 1)
}

fn prose_paragraph(vocab: &[String], stream: &mut RngStream, out: &mut String) {
    let sentences = 2 + stream.below(4);
    for _ in 0..sentences {
        let words = 4 + stream.below(9);
        for w in 0..words {
            let word = &vocab[pick_zipf(stream, vocab.len())];
            if w == 0 {
                let mut chars = word.chars();
                if let Some(c) = chars.next() {
                    out.push(c.to_ascii_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push(' ');
                out.push_str(word);
            }
        }
        out.push_str(". ");
    }
    out.push('\n');
}

fn code_paragraph(stream: &mut RngStream, out: &mut String) {
    let lines = 3 + stream.below(5);
    for _ in 0..lines {
        match stream.below(4) {
            0 => out.push_str(&format!(
                "let v{} = f{}(a{}, {});\n",
                stream.below(9),
                stream.below(9),
                stream.below(9),
                stream.below(100)
            )),
            1 => out.push_str(&format!(
                "if x{} > {} {{ y{} += {}; }}\n",
                stream.below(9),
                stream.below(50),
                stream.below(9),
                stream.below(9)
            )),
            2 => out.push_str(&format!(
                "for i in 0..{} {{ total += w[{}] * x[i]; }}\n",
                stream.below(64),
                stream.below(9)
            )),
            _ => out.push_str(&format!(
                "return v{} + v{};\n",
                stream.below(9),
                stream.below(9)
            )),
        }
    }
    out.push('\n');
}

fn table_paragraph(stream: &mut RngStream, out: &mut String) {
    out.push_str("id,value,flag\n");
    let rows = 3 + stream.below(4);
    for _ in 0..rows {
        out.push_str(&format!(
            "{},{}.{:02},{}\n",
            stream.below(10_000),
            stream.below(100),
            stream.below(100),
            if stream.below(2) == 0 { "true" } else { "false" }
        ));
    }
    out.push('\n');
}

/// Generates at least `min_bytes` of deterministic mixed-domain text.
pub fn generate_corpus(seed: u64, min_bytes: usize) -> String {
    let rng = RngState::new(seed).split("corpus");
    let vocab_a = make_vocab(&rng.split("vocab_a"), 160);
    let vocab_b = make_vocab(&rng.split("vocab_b"), 160);
    let mut stream = rng.split("paragraphs").stream();
    let mut out = String::with_capacity(min_bytes + 1024);
    while out.len() < min_bytes {
        match stream.below(5) {
            0 | 1 => prose_paragraph(&vocab_a, &mut stream, &mut out),
            2 | 3 => prose_paragraph(&vocab_b, &mut stream, &mut out),
            4 => {
                if stream.below(2) == 0 {
                    code_paragraph(&mut stream, &mut out)
                } else {
                    table_paragraph(&mut stream, &mut out)
                }
            }
            _ => unreachable!(),
        }
    }
    out
}

/// Deterministic 90/10 split: the final tenth is held out for evaluation.
pub fn train_eval_split(data: &[u8]) -> (&[u8], &[u8]) {
    let cut = data.len() - data.len() / 10;
    (&data[..cut], &data[cut..])
}
