#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recipegen::corpus::CleanRecipe;
use recipegen::model::{LanguageModel, ModelError};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Next-token log-probabilities drawn at random per prefix, so every
/// conditional is fixed once the seed is.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    pub vocab: usize,
    pub seed: u64,
    pub max_context: usize,
}

impl ToyScorer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        ToyScorer { vocab, seed, max_context: 64 }
    }

    pub fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h: u64 = self.seed.wrapping_mul(0x100_0000_01B3) ^ 0xCBF2_9CE4_8422_2325;
        for &t in prefix {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01B3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().map(|l| l - m - z.ln()).collect()
    }
}

impl LanguageModel for ToyScorer {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn start(&self, prompt: &[u32]) -> Result<(Vec<u32>, Vec<f64>), ModelError> {
        Ok((prompt.to_vec(), self.log_probs(prompt)))
    }

    fn advance(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>, ModelError> {
        state.push(token);
        Ok(self.log_probs(state))
    }
}

/// Every complete continuation of `prompt`: stops at `eos` or at `max_len`
/// total tokens. Returns (ids, score) pairs.
pub fn enumerate(model: &ToyScorer, prompt: &[u32], max_len: usize, eos: u32) -> Vec<(Vec<u32>, f64)> {
    let mut done = Vec::new();
    let mut frontier = vec![(prompt.to_vec(), 0.0f64)];
    while let Some((ids, score)) = frontier.pop() {
        if ids.len() >= max_len || (ids.len() > prompt.len() && *ids.last().unwrap() == eos) {
            done.push((ids, score));
            continue;
        }
        let lp = model.log_probs(&ids);
        for (t, l) in lp.iter().enumerate() {
            let mut next = ids.clone();
            next.push(t as u32);
            frontier.push((next, score + l));
        }
    }
    done
}

/// Reference greedy decoder written against the raw scorer.
pub fn greedy_reference(model: &ToyScorer, prompt: &[u32], max_len: usize, eos: u32) -> Vec<u32> {
    let mut ids = prompt.to_vec();
    while ids.len() < max_len {
        let lp = model.log_probs(&ids);
        let mut best = 0;
        for t in 1..lp.len() {
            if lp[t] > lp[best] {
                best = t;
            }
        }
        ids.push(best as u32);
        if best as u32 == eos {
            break;
        }
    }
    ids
}

pub fn has_repeated_ngram(ids: &[u32], n: usize) -> bool {
    let mut seen = std::collections::HashSet::new();
    ids.windows(n).any(|w| !seen.insert(w.to_vec()))
}

fn pre_split(text: &str, specials: &[&str]) -> Vec<String> {
    // Plain spans between special-token matches.
    let mut spans = vec![text.to_string()];
    for s in specials {
        spans = spans.iter().flat_map(|span| span.split(s).map(str::to_string).collect::<Vec<_>>()).collect();
    }
    spans.into_iter().filter(|s| !s.is_empty()).collect()
}

fn word_chunks(span: &str) -> Vec<Vec<u8>> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut prev: Option<char> = None;
    for c in span.chars() {
        if c.is_whitespace() && prev.is_some_and(|p| !p.is_whitespace()) && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(c);
        prev = Some(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.into_iter().map(String::into_bytes).collect()
}

/// Brute-force BPE: recount every adjacent pair over the whole corpus each
/// round, take the most frequent (earliest first occurrence on ties), and
/// merge it everywhere. Returns merges as byte strings.
pub type Merge = (Vec<u8>, Vec<u8>);

pub fn bpe_oracle(corpus: &[&str], specials: &[&str], max_merges: usize) -> Vec<Merge> {
    let mut seqs: Vec<Vec<Vec<u8>>> = Vec::new();
    for text in corpus {
        for span in pre_split(text, specials) {
            for chunk in word_chunks(&span) {
                seqs.push(chunk.into_iter().map(|b| vec![b]).collect());
            }
        }
    }
    let mut known: std::collections::HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();
    while merges.len() < max_merges {
        let mut counts: HashMap<Merge, (usize, usize)> = HashMap::new();
        let mut pos = 0;
        for s in &seqs {
            for w in s.windows(2) {
                let e = counts.entry((w[0].clone(), w[1].clone())).or_insert((0, pos));
                e.0 += 1;
                pos += 1;
            }
        }
        let mut best: Option<(Merge, usize, usize)> = None;
        for (pair, (count, first)) in counts {
            let joined = [pair.0.clone(), pair.1.clone()].concat();
            if known.contains(&joined) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, c, f)) => count > *c || (count == *c && first < *f),
            };
            if better {
                best = Some((pair, count, first));
            }
        }
        let Some(((a, b), count, _)) = best else { break };
        if count < 2 {
            break;
        }
        let joined = [a.clone(), b.clone()].concat();
        for s in &mut seqs {
            let mut out = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == a && s[i + 1] == b {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(s[i].clone());
                    i += 1;
                }
            }
            *s = out;
        }
        known.insert(joined);
        merges.push((a, b));
    }
    merges
}

/// Random recipe whose text avoids the reserved strings and item prefixes.
pub fn random_recipe(rng: &mut ChaCha8Rng) -> CleanRecipe {
    const WORDS: &[&str] = &[
        "salt", "crème", "fraîche", "piña", "2", "½", "cup", "oven", "until", "golden", "stir", "jalapeño", "zest",
        "oil", "(optional)", "grams", "mix,", "fold", "über", "kale", "ñora", "chili", "180°C",
    ];
    let phrase = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..6);
        (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    CleanRecipe {
        title: phrase(rng),
        ingredients: (0..rng.gen_range(1..8)).map(|_| phrase(rng)).collect(),
        instructions: (0..rng.gen_range(1..6)).map(|_| phrase(rng)).collect(),
    }
}

/// `enumerate` restricted to continuations without a repeated `n`-gram
/// (prompt included); branches with every token blocked are dropped.
pub fn enumerate_blocked(model: &ToyScorer, prompt: &[u32], max_len: usize, eos: u32, n: usize) -> Vec<(Vec<u32>, f64)> {
    let mut done = Vec::new();
    let mut frontier = vec![(prompt.to_vec(), 0.0f64)];
    while let Some((ids, score)) = frontier.pop() {
        if ids.len() >= max_len || (ids.len() > prompt.len() && *ids.last().unwrap() == eos) {
            done.push((ids, score));
            continue;
        }
        let lp = model.log_probs(&ids);
        for (t, l) in lp.iter().enumerate() {
            let mut next = ids.clone();
            next.push(t as u32);
            if n > 0 && has_repeated_ngram(&next, n) {
                continue;
            }
            frontier.push((next, score + l));
        }
    }
    done
}

/// Largest relative disagreement between the analytic gradient and central
/// differences of the eval-mode loss, over every parameter. Relative error
/// is `|a - n| / max(|a|, |n|, floor)`.
pub fn max_fd_error(
    model: &recipegen::model::Model<f64>,
    batch: &recipegen::model::Batch,
    h: f64,
    floor: f64,
) -> (f64, String) {
    use recipegen::model::TrainState;
    let (_, grads) = model.backward(batch, TrainState::eval()).unwrap();
    let names = model.params.names();
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    for (ti, g) in grads.tensors().iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.params.tensors()[ti].data[j];
            probe.params.tensors_mut()[ti].data[j] = orig + h;
            let up = probe.loss(batch, TrainState::eval()).unwrap();
            probe.params.tensors_mut()[ti].data[j] = orig - h;
            let down = probe.loss(batch, TrainState::eval()).unwrap();
            probe.params.tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{}[{j}] analytic {analytic:e} numeric {numeric:e}", names[ti]));
            }
        }
    }
    worst
}

/// Adds N(0, scale) noise to every parameter so gains and biases leave
/// their initial values.
pub fn jitter<T: recipegen::model::Real>(model: &mut recipegen::model::Model<T>, scale: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).unwrap();
    for t in model.params.tensors_mut() {
        for x in &mut t.data {
            *x += T::of(normal.sample(&mut rng));
        }
    }
}

/// Causality and padding probes on one random input; returns the largest
/// logit change that should have been zero.
pub fn probe_once(model: &recipegen::model::Model<f32>, rng: &mut ChaCha8Rng, max_seq: usize) -> f64 {
    use recipegen::model::{Batch, TrainState};
    let v = model.config.vocab_size as u32;
    let seq = rng.gen_range(2..=max_seq);
    let ids: Vec<u32> = (0..seq).map(|_| rng.gen_range(0..v)).collect();
    let logits = |ids: &[u32], mask: &[u8]| {
        let b = Batch::new(ids.to_vec(), mask.to_vec(), 1, ids.len()).unwrap();
        model.forward(&b, TrainState::eval()).unwrap()
    };
    let vs = v as usize;
    let base = logits(&ids, &vec![1; seq]);
    let mut worst = 0.0f64;
    let mut diff = |a: &[f32], b: &[f32]| {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs() as f64);
        }
    };

    // Changing the token at k leaves every earlier position alone.
    let k = rng.gen_range(1..seq);
    let mut changed = ids.clone();
    changed[k] = (changed[k] + 1 + rng.gen_range(0..v - 1)) % v;
    let after = logits(&changed, &vec![1; seq]);
    diff(&base[..k * vs], &after[..k * vs]);

    // Trailing masked positions, whatever they hold, change nothing real.
    let extra = rng.gen_range(1..=4);
    let mut padded = ids.clone();
    padded.extend((0..extra).map(|_| rng.gen_range(0..v)));
    let mut mask = vec![1u8; seq];
    mask.extend(std::iter::repeat_n(0, extra));
    if padded.len() <= model.config.n_positions {
        let with_pad = logits(&padded, &mask);
        diff(&base, &with_pad[..seq * vs]);
        let mut other = padded.clone();
        for t in &mut other[seq..] {
            *t = rng.gen_range(0..v);
        }
        let other_pad = logits(&other, &mask);
        diff(&with_pad[..seq * vs], &other_pad[..seq * vs]);
    }

    // A masked key in the middle is invisible to every unmasked query.
    if seq >= 3 {
        let j = rng.gen_range(1..seq - 1);
        let mut mask = vec![1u8; seq];
        mask[j] = 0;
        let a = logits(&ids, &mask);
        let mut other = ids.clone();
        other[j] = (other[j] + 1) % v;
        let b = logits(&other, &mask);
        for t in (0..seq).filter(|&t| t != j) {
            diff(&a[t * vs..(t + 1) * vs], &b[t * vs..(t + 1) * vs]);
        }
    }
    worst
}

/// The stored-site fixture configured for a model small enough to train in
/// seconds.
pub fn tiny_site_config(out_dir: &std::path::Path) -> recipegen::config::RunConfig {
    let text = std::fs::read_to_string(fixture("site/run.conf")).unwrap()
        + "tokenizer.vocab_size = 320\n\
           model.n_positions = 160\n\
           model.n_embd = 16\n\
           model.n_layer = 1\n\
           model.n_head = 2\n\
           optim.epochs = 2\n\
           optim.batch_size = 4\n\
           optim.warmup_steps = 2\n\
           train.max_length = 160\n\
           clean.min_instruction_chars = 20\n\
           generate.max_length = 40\n";
    let overrides = recipegen::config::Overrides { seed: None, out_dir: Some(out_dir.to_path_buf()) };
    recipegen::config::RunConfig::from_text(&text, &fixture("site"), &overrides).unwrap()
}

/// Seeded synthetic corpus with varied leading letters.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<CleanRecipe> {
    const FOODS: &[&str] = &[
        "apples", "basil", "carrots", "dates", "eggs", "fennel", "garlic", "honey", "iceberg lettuce", "jam", "kale",
        "leeks", "mushrooms", "nutmeg", "onions", "parsley", "quinoa", "rice", "spinach", "tomatoes", "udon",
        "vanilla", "walnuts", "yogurt", "zucchini", "lemons", "butter", "flour", "sugar", "milk", "cream", "salt",
    ];
    const STEPS: &[&str] = &[
        "Chop everything finely and set aside in a large bowl",
        "Heat the pan over a medium flame and add a little oil",
        "Stir gently until the mixture thickens and turns glossy",
        "Bake in a hot oven until golden brown on top",
        "Season to taste and leave to rest for ten minutes",
        "Serve immediately with fresh bread on the side",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(2..7);
            let ingredients: Vec<String> = (0..k)
                .map(|_| format!("{} g {}", rng.gen_range(1..500), FOODS[rng.gen_range(0..FOODS.len())]))
                .collect();
            let s = rng.gen_range(1..4);
            let instructions: Vec<String> = (0..s).map(|_| STEPS[rng.gen_range(0..STEPS.len())].to_string()).collect();
            CleanRecipe { title: format!("Dish {i}"), ingredients, instructions }
        })
        .collect()
}

pub type Snapshot = Vec<(String, Vec<u8>)>;

/// Every file under `dir` with its bytes, sorted by name.
pub fn snapshot(dir: &std::path::Path) -> Snapshot {
    let mut out: Snapshot = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}
