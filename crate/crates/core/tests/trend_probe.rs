use std::time::Instant;
use threadloom_core::config::{DecoderKind, RunConfig};
use threadloom_core::decode::DecodeTrace;
use threadloom_core::metrics::{evaluate_corpus, EvalOptions};
use threadloom_core::model::GraphSet;
use threadloom_core::synth::{Span, SynthConfig};
use threadloom_core::train::{predict_corpus, synth_splits, train};

struct Variant {
    name: &'static str,
    topic_strength: f64,
    mention_prob: f64,
    speaker_pool: usize,
    speakers: (usize, usize),
    utt: (usize, usize),
    skip: f64,
    epochs: usize,
    lr: f64,
}

fn run_for(v: &Variant, seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.hidden = 16;
    run.model.label_dim = 4;
    run.model.egcn_layers = 2;
    run.model.ffnn_hidden = 12;
    run.model.buckets = 256;
    run.model.window = 12;
    run.train.epoch_size = v.epochs;
    run.train.learning_rate = v.lr;
    run.synth = SynthConfig {
        dialogues: 200,
        sessions: Span::new(2, 4),
        utterances_per_session: Span::new(v.utt.0, v.utt.1),
        speaker_pool: v.speaker_pool,
        speakers_per_session: Span::new(v.speakers.0, v.speakers.1),
        mention_prob: v.mention_prob,
        reply_skip_prob: v.skip,
        topic_words: 6,
        words_per_utterance: Span::new(3, 6),
        topic_strength: v.topic_strength,
        common_words: 40,
        seed: 0,
        id_prefix: "probe".into(),
    };
    run.synth_test_dialogues = 40;
    run.seed = seed;
    run
}

fn early_entropy(traces: &[DecodeTrace]) -> f64 {
    let mut vals = Vec::new();
    for t in traces {
        let n = t.steps.len();
        let k = (n as f64 * 0.1).ceil() as usize;
        for s in &t.steps[..k.max(1).min(n)] {
            vals.push(if s.entropy.is_finite() { s.entropy } else { 50.0 });
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn probe_trends() {
    let variants = [
        Variant { name: "G-lr03", topic_strength: 0.6, mention_prob: 0.4, speaker_pool: 4, speakers: (2, 2), utt: (4, 8), skip: 0.35, epochs: 6, lr: 0.03 },
        Variant { name: "H-lr02", topic_strength: 0.6, mention_prob: 0.4, speaker_pool: 4, speakers: (2, 2), utt: (4, 8), skip: 0.35, epochs: 8, lr: 0.02 },
    ];
    let opts = EvalOptions::default();
    for v in &variants {
        for seed in [101u64, 202, 303] {
            let t0 = Instant::now();
            let run = run_for(v, seed);
            let (train_c, test_c) = synth_splits(&run).unwrap();
            let golds: Vec<_> = test_c.iter().map(|(_, f)| f.clone()).collect();
            let dialogues: Vec<_> = test_c.iter().map(|(d, _)| d.clone()).collect();

            let (full, _) = train(&train_c, &run).unwrap();
            let mut run_noall = run.clone();
            run_noall.model.graphs = GraphSet::none();
            let (noall, _) = train(&train_c, &run_noall).unwrap();
            let mut run_pair = run.clone();
            run_pair.train.disable_l2 = true;
            run_pair.train.disable_l3 = true;
            let (pairwise, _) = train(&train_c, &run_pair).unwrap();

            let decode = |m: &threadloom_core::model::Model, dec| {
                predict_corpus(m, &dialogues, dec, None).unwrap()
            };
            let fe = decode(&full, DecoderKind::EasyFirst);
            let fs = decode(&full, DecoderKind::Sequential);
            let ne = decode(&noall, DecoderKind::EasyFirst);
            let pe = decode(&pairwise, DecoderKind::EasyFirst);
            let to_rep = |preds: &[(threadloom_core::corpus::ReplyForest, DecodeTrace)]| {
                let fs: Vec<_> = preds.iter().map(|(f, _)| f.clone()).collect();
                evaluate_corpus(&golds, &fs, &opts)
            };
            let (rfe, rfs, rne, rpe) = (to_rep(&fe), to_rep(&fs), to_rep(&ne), to_rep(&pe));
            let efe = early_entropy(&fe.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
            let efs = early_entropy(&fs.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
            eprintln!(
                "{} seed={seed}: link full={:.4} noall={:.4} gap={:+.2} | ef-seq={:+.2} | clF1 hrl={:.3} pair={:.3} diff={:+.3} | H10 ef={:.4} seq={:.4} ok={} | {:.0}s",
                v.name, rfe.link.f1, rne.link.f1, 100.0*(rfe.link.f1-rne.link.f1),
                100.0*(rfe.link.f1-rfs.link.f1),
                rfe.cluster.f1, rpe.cluster.f1, rfe.cluster.f1-rpe.cluster.f1,
                efe, efs, efe <= efs,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    panic!("show me");
}
