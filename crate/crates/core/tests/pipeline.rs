use nac_core::checkpoint;
use nac_core::executor::{flop_estimate, ExecutorConfig};
use nac_core::generator::ConditionalConfig;
use nac_core::model::{Batch, Mode, ModelConfig, NacModel};
use nac_core::pruning::drop_modules;
use nac_core::tasks::{byte_tokenize, gen_listops, Example, TaskConfig};
use nac_core::train::{stream_rng, train, TrainConfig, STREAM_INIT};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ListOps evaluator over whitespace tokens.
fn oracle(tokens: &[&str], at: &mut usize) -> u32 {
    let tok = tokens[*at];
    *at += 1;
    if let Ok(d) = tok.parse::<u32>() {
        return d;
    }
    let mut args = Vec::new();
    while tokens[*at] != "]" {
        args.push(oracle(tokens, at));
    }
    *at += 1;
    args.sort_unstable();
    match tok {
        "[MAX" => *args.last().unwrap(),
        "[MIN" => args[0],
        "[SM" => args.iter().sum::<u32>() % 10,
        "[MED" => {
            let n = args.len();
            if n % 2 == 1 {
                args[n / 2]
            } else {
                (args[n / 2 - 1] + args[n / 2]) / 2
            }
        }
        other => panic!("unknown operator {other}"),
    }
}

#[test]
fn ten_thousand_listops_agree_with_an_independent_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let (expr, label) = gen_listops(4, 4, 200, &mut rng);
        let tokens: Vec<&str> = expr.split_whitespace().collect();
        assert!(tokens.len() <= 200);
        let mut at = 0;
        assert_eq!(oracle(&tokens, &mut at) as usize, label, "{expr}");
        assert_eq!(at, tokens.len(), "{expr}");
    }
}

proptest! {
    #[test]
    fn byte_tokenizer_is_injective_below_the_cap(a in prop::collection::vec(any::<u8>(), 1..40), b in prop::collection::vec(any::<u8>(), 1..40)) {
        let (ta, tb) = (byte_tokenize(&a, 64).unwrap(), byte_tokenize(&b, 64).unwrap());
        prop_assert_eq!(a == b, ta == tb);
        prop_assert!(ta.iter().all(|&t| t < 256));
    }
}

fn tiny_model(seed: u64) -> (TaskConfig, NacModel) {
    let task = TaskConfig::parity(8);
    let exec = ExecutorConfig {
        layers: 2,
        processors: 8,
        readouts: 2,
        d_model: 16,
        d_sig: 8,
        d_code: 8,
        d_token: 16,
        ffn_hidden: 16,
        ..ExecutorConfig::desk()
    };
    let cfg = ModelConfig::for_task(&task, exec, Mode::Unconditional, ConditionalConfig::default());
    (task, NacModel::new(cfg, &mut stream_rng(seed, STREAM_INIT)).unwrap())
}

fn inputs(task: &TaskConfig, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n).map(|_| task.sample(&mut rng)).collect()
}

#[test]
fn dropping_no_modules_reproduces_the_full_model() {
    let (task, model) = tiny_model(3);
    let batch = Batch::new(&inputs(&task, 100)).unwrap();
    let full = model.logits(&batch, &mut ChaCha8Rng::seed_from_u64(0), &model.eval_options()).unwrap();
    let opts = drop_modules(&model, 0).unwrap();
    assert_eq!(opts.active.as_ref().unwrap().len(), 8);
    let kept = model.logits(&batch, &mut ChaCha8Rng::seed_from_u64(0), &opts).unwrap();
    assert!(full.max_abs_diff(&kept) < 1e-10);
}

#[test]
fn flops_fall_strictly_as_modules_are_dropped() {
    for cfg in [ExecutorConfig::desk(), ExecutorConfig::large()] {
        let flops: Vec<u64> = (1..=cfg.processors)
            .rev()
            .map(|active| flop_estimate(&cfg, 64, active).total())
            .collect();
        assert!(flops.windows(2).all(|w| w[0] > w[1]), "{flops:?}");
    }
}

#[test]
fn a_trained_model_survives_a_checkpoint_round_trip() {
    let (task, mut model) = tiny_model(4);
    let cfg = TrainConfig {
        steps: 20,
        warmup_steps: 2,
        batch_size: 8,
        eval_every: 20,
        eval_size: 32,
        ..TrainConfig::default()
    };
    train(&mut model, &task, None, &cfg, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.nacc");
    checkpoint::save(&model.store, &path).unwrap();
    let (_, mut other) = tiny_model(5);
    checkpoint::load_into(&mut other.store, &path).unwrap();
    let batch = Batch::new(&inputs(&task, 16)).unwrap();
    let a = model.logits(&batch, &mut ChaCha8Rng::seed_from_u64(1), &model.eval_options()).unwrap();
    let b = other.logits(&batch, &mut ChaCha8Rng::seed_from_u64(1), &other.eval_options()).unwrap();
    assert_eq!(a, b);
}
