//! Acceptance criteria 1-8. Runs without the libtest harness and prints one
//! pass / FAIL / not run line per criterion; exits nonzero on any FAIL.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scvd_autograd::Tape;
use scvd_core::cfg::{build_cfg, EdgeKind};
use scvd_core::corpus::load_manifest;
use scvd_core::embedding::ProviderKind;
use scvd_core::evm::opcodes::mnemonic;
use scvd_core::evm::{disassemble_bytes, simplify_opcodes, CompilerConfig, SolidityCompiler};
use scvd_core::model::{assemble_variant, EncoderPreset, Model, ModelInput, ModelVariantConfig, Variant};
use scvd_core::pipeline::{self, PipelineConfig};
use scvd_core::solidity_prep::clean_source;
use scvd_core::synthetic::{separable_dataset, separable_default, SYNTHETIC_VOCAB_ROWS};
use scvd_core::train_eval::{evaluate, train, Averaging, ConfusionMatrix, Example, Metrics, TrainingHyper};

const OPCODE_BUDGET: Duration = Duration::from_secs(1);
const FUZZ_BUDGET: Duration = Duration::from_secs(30);
const FUZZ_CASES: usize = 10_000;
const FUZZ_MAX_LEN: usize = 512;
const SHAPE_BUDGET: Duration = Duration::from_secs(120);
const SIMPLEX_TOL: f64 = 1e-5;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const OVERFIT_BUDGET: Duration = Duration::from_secs(180);
const OVERFIT_STEPS: usize = 200;
const OVERFIT_MIN_ACCURACY: f64 = 0.95;
const METRIC_CASES: usize = 1000;
const METRIC_TOL: f64 = 1e-9;
const SMOKE_BUDGET: Duration = Duration::from_secs(600);
const SMOKE_EPOCHS: usize = 2;
const REFERENCE_ACCURACY: f64 = 0.7796;
const REFERENCE_TOL: f64 = 0.05;

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, || format!("took {:.2}s, budget {}s", t.as_secs_f64(), budget.as_secs()))
}

/// Expected simplified name of a lone opcode byte, written out range by range.
fn collapsed_name(byte: u8) -> String {
    match byte {
        0x5f => "PUSH0".into(),
        0x60..=0x63 => format!("PUSH{}", byte - 0x5f),
        0x64..=0x7f => "PUSH".into(),
        0x80..=0x8f => "DUP".into(),
        0x90..=0x9f => "SWAP".into(),
        0xa0 => "LOG0".into(),
        0xa1..=0xa4 => "LOG".into(),
        _ => mnemonic(byte).into_owned(),
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let spot = [(0x01, "ADD"), (0x20, "SHA3"), (0x54, "SLOAD"), (0x56, "JUMP"), (0xf1, "CALL"), (0xfe, "INVALID_0xFE")];
    for (b, name) in spot {
        ensure(mnemonic(b) == name, || format!("byte {b:#04x} named {}", mnemonic(b)))?;
    }
    for b in 0..=255u8 {
        let got = simplify_opcodes(&disassemble_bytes(&[b]));
        let expected = collapsed_name(b);
        ensure(got.mnemonics == [expected.clone()], || format!("byte {b:#04x}: {:?} != {expected}", got.mnemonics))?;
        if !(0x5f..=0xa4).contains(&b) {
            let raw = mnemonic(b);
            ensure(!["DUP", "SWAP", "PUSH", "LOG"].iter().any(|f| raw.starts_with(f)), || format!("{raw} left uncollapsed"))?;
        }
    }
    within(start, OPCODE_BUDGET)?;
    Ok(format!("256 bytes match, {:.3}s", start.elapsed().as_secs_f64()))
}

fn check_cfg_invariants(code: &[u8]) -> Result<(), String> {
    let ins = disassemble_bytes(code);
    let mut offset = 0;
    for i in &ins {
        ensure(i.offset == offset, || format!("gap at {offset}"))?;
        offset += i.size();
    }
    ensure(offset == code.len(), || format!("decoded {offset} of {} bytes", code.len()))?;
    let g = build_cfg(&ins);
    let flat: Vec<_> = g.blocks.iter().flat_map(|b| b.instructions.iter().cloned()).collect();
    ensure(flat == ins, || "blocks do not partition the instructions".into())?;
    for (k, b) in g.blocks.iter().enumerate() {
        ensure(b.id == k && !b.instructions.is_empty(), || format!("block {k} malformed"))?;
        ensure(b.instructions.iter().skip(1).all(|i| i.opcode != 0x5b), || format!("JUMPDEST inside block {k}"))?;
    }
    for e in &g.edges {
        ensure(e.src < g.blocks.len() && e.dst < g.blocks.len(), || format!("edge {e:?} out of range"))?;
        if matches!(e.kind, EdgeKind::Jump | EdgeKind::BranchTrue) {
            ensure(g.blocks[e.dst].instructions[0].opcode == 0x5b, || format!("jump edge {e:?} misses JUMPDEST"))?;
        }
    }
    Ok(())
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    const JUMPY: [u8; 5] = [0x56, 0x57, 0x5b, 0x60, 0x61];
    for case in 0..FUZZ_CASES {
        let len = rng.gen_range(0..=FUZZ_MAX_LEN);
        let jumpy = case % 2 == 1;
        let code: Vec<u8> = (0..len)
            .map(|_| if jumpy && rng.gen_bool(0.5) { JUMPY[rng.gen_range(0..JUMPY.len())] } else { rng.gen() })
            .collect();
        match catch_unwind(|| check_cfg_invariants(&code)) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(format!("case {case}: {e}")),
            Err(_) => return Err(format!("case {case}: panicked on {}", hex::encode(&code))),
        }
    }
    within(start, FUZZ_BUDGET)?;
    Ok(format!("{FUZZ_CASES} byte strings, {:.2}s", start.elapsed().as_secs_f64()))
}

fn tiny(v: Variant) -> ModelVariantConfig {
    ModelVariantConfig::for_variant(v, SYNTHETIC_VOCAB_ROWS)
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let data: Vec<ModelInput<f32>> = separable_dataset::<f32>(32, 24, 3).into_iter().map(|(x, _)| x).collect();
    let refs: Vec<&ModelInput<f32>> = data.iter().collect();
    for v in Variant::ALL {
        let m = assemble_variant::<f32>(&tiny(v)).map_err(|e| format!("{v}: {e}"))?;
        for b in [1, 7, 32] {
            let p = m.predict_proba(&refs[..b]).map_err(|e| format!("{v} B={b}: {e}"))?;
            ensure(p.dim() == (b, 3), || format!("{v} B={b}: shape {:?}", p.dim()))?;
            for row in p.rows() {
                let s: f64 = row.iter().map(|&x| x as f64).sum();
                ensure((s - 1.0).abs() < SIMPLEX_TOL, || format!("{v} B={b}: row sums to {s}"))?;
            }
        }
    }
    let vs = assemble_variant::<f32>(&tiny(Variant::VulnSense)).map_err(|e| e.to_string())?.fusion_width();
    let m3 = assemble_variant::<f32>(&tiny(Variant::M3)).map_err(|e| e.to_string())?.fusion_width();
    ensure((vs, m3) == (194, 128), || format!("fusion widths VulnSense {vs}, M3 {m3}"))?;
    within(start, SHAPE_BUDGET)?;
    Ok(format!("7 variants × B∈{{1,7,32}}, fusion 194/128, {:.1}s", start.elapsed().as_secs_f64()))
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let data = separable_dataset::<f32>(4, 24, 2);
    let refs: Vec<&ModelInput<f32>> = data.iter().map(|(x, _)| x).collect();
    let targets: Vec<usize> = data.iter().map(|(_, y)| y.index()).collect();
    for v in Variant::ALL {
        let m = assemble_variant::<f32>(&tiny(v)).map_err(|e| format!("{v}: {e}"))?;
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = m.logits(&tape, &refs, Some(&mut rng)).map_err(|e| format!("{v}: {e}"))?;
        let grads = tape.backward(tape.cross_entropy(z, &targets));
        for kind in v.features() {
            let reached = m.store().iter().any(|(id, p)| {
                Model::<f32>::param_branch(&p.name) == Some(*kind)
                    && grads.get(id).is_some_and(|g| g.iter().any(|x| *x != 0.0))
            });
            ensure(reached, || format!("{v}: no gradient in the {kind} branch"))?;
        }
    }
    within(start, GRADIENT_BUDGET)?;
    Ok(format!("every active branch of 7 variants, {:.1}s", start.elapsed().as_secs_f64()))
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let data: Vec<Example<f32>> = separable_default::<f32>(12, 3)
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| Example::new(format!("s{i}"), x, y))
        .collect();
    let model = assemble_variant::<f32>(&tiny(Variant::VulnSense)).map_err(|e| e.to_string())?;
    let hyper = TrainingHyper { epochs: OVERFIT_STEPS, seed: 1, ..Default::default() };
    let out = train(model, &data, &hyper).map_err(|e| e.to_string())?;
    ensure(out.steps == OVERFIT_STEPS, || format!("{} steps", out.steps))?;
    let acc = evaluate(&out.model, &data, Averaging::Weighted).map_err(|e| e.to_string())?.accuracy;
    ensure(acc >= OVERFIT_MIN_ACCURACY, || format!("train accuracy {acc}"))?;
    within(start, OVERFIT_BUDGET)?;
    Ok(format!("train accuracy {acc:.3} after {OVERFIT_STEPS} steps, {:.1}s", start.elapsed().as_secs_f64()))
}

/// Scores from an expanded list of (truth, prediction) pairs.
fn from_pairs(cm: &[[u64; 3]; 3], weighted: bool) -> [f64; 4] {
    let pairs: Vec<(usize, usize)> = (0..3)
        .flat_map(|t| (0..3).flat_map(move |p| std::iter::repeat_n((t, p), cm[t][p] as usize)))
        .collect();
    let n = pairs.len() as f64;
    let acc = pairs.iter().filter(|(t, p)| t == p).count() as f64 / n;
    let mut s = [acc, 0.0, 0.0, 0.0];
    for k in 0..3 {
        let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as f64;
        let pred = pairs.iter().filter(|&&(_, p)| p == k).count() as f64;
        let actual = pairs.iter().filter(|&&(t, _)| t == k).count() as f64;
        let prec = if pred > 0.0 { tp / pred } else { 0.0 };
        let rec = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        let w = if weighted { actual / n } else { 1.0 / 3.0 };
        s[1] += w * prec;
        s[2] += w * rec;
        s[3] += w * f;
    }
    s
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut done = 0;
    while done < METRIC_CASES {
        let mut m = [[0u64; 3]; 3];
        let max = if done % 4 == 0 { 3 } else { 60 };
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(0..=max);
            }
        }
        if m.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        let cm = ConfusionMatrix(m);
        for (avg, weighted) in [(Averaging::Weighted, true), (Averaging::Macro, false)] {
            let got = Metrics::from_confusion(&cm, avg);
            let want = from_pairs(&m, weighted);
            let have = [got.accuracy, got.precision, got.recall, got.f1];
            for (h, w) in have.iter().zip(want) {
                ensure((h - w).abs() <= METRIC_TOL, || format!("{m:?} {avg:?}: {have:?} vs {want:?}"))?;
            }
        }
        let w = Metrics::from_confusion(&cm, Averaging::Weighted);
        ensure(w.recall == w.accuracy, || format!("{m:?}: weighted recall {} != accuracy {}", w.recall, w.accuracy))?;
        done += 1;
    }
    Ok(format!("{METRIC_CASES} matrices within {METRIC_TOL:e}, weighted recall == accuracy"))
}

fn smoke_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus/smoke")
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(corpus.join("contracts")).map_err(|e| e.to_string())?;
    let compiler = SolidityCompiler::discover(&CompilerConfig::default()).ok();
    let manifest_name = if compiler.is_some() { "manifest.jsonl" } else { "manifest.bytecode.jsonl" };
    std::fs::copy(smoke_dir().join(manifest_name), corpus.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let records = load_manifest(corpus.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let options = PipelineConfig::default().clean;
    for r in &records {
        let name = r.source_path.file_name().expect("file name");
        let text = std::fs::read_to_string(smoke_dir().join("contracts").join(name)).map_err(|e| e.to_string())?;
        std::fs::write(&r.source_path, &text).map_err(|e| e.to_string())?;
        let cleaned = clean_source(&text, options);
        ensure(!cleaned.text.contains("//") && !cleaned.text.contains("/*"), || format!("{} keeps comments", r.id))?;
        std::fs::write(r.source_path.with_extension("clean.sol"), cleaned.text).map_err(|e| e.to_string())?;
    }

    let mut config = PipelineConfig {
        manifest: corpus.join("manifest.jsonl"),
        workspace: tmp.path().join("ws"),
        ..Default::default()
    };
    config.embedding.provider = ProviderKind::Local;
    config.ablation.variants = vec![Variant::VulnSense, Variant::BiLstm];
    config.ablation.epochs = vec![SMOKE_EPOCHS];
    let features = pipeline::materialize(&config, &records).map_err(|e| e.to_string())?;
    ensure(features.failed.is_empty(), || format!("feature failures {:?}", features.failed))?;
    let compiled = records.iter().filter(|r| {
        config.store().load_meta(&r.id).is_some_and(|m| m.bytecode_origin.starts_with("solc"))
    });
    let compiled = compiled.count();

    let summary = pipeline::ablation::<f32>(&config, |_| {}).map_err(|e| e.to_string())?;
    ensure(summary.cells.len() == 2, || format!("{} cells", summary.cells.len()))?;
    let test_size = features.test_records;
    for path in &summary.files.cell_reports {
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(json["status"] == "ok", || format!("{}: {}", path.display(), json["error"]))?;
        let rows = json["report"]["confusion"].as_array().ok_or("no confusion matrix")?;
        let total: u64 = rows.iter().flat_map(|r| r.as_array().into_iter().flatten()).filter_map(|v| v.as_u64()).sum();
        ensure(rows.len() == 3 && total == test_size as u64, || format!("{}: confusion sums to {total}", path.display()))?;
        ensure(json["report"]["config_hash"] == config.hash().as_str(), || "config hash missing".into())?;
    }
    let csv = std::fs::read_to_string(&summary.files.csv).map_err(|e| e.to_string())?;
    ensure(csv.lines().count() == 3, || "csv rows".into())?;
    let table = std::fs::read_to_string(&summary.files.table).map_err(|e| e.to_string())?;
    ensure(table.contains("VulnSense") && table.contains("BiLSTM"), || "table columns".into())?;
    ensure(summary.provenance.is_file(), || "provenance missing".into())?;
    within(start, SMOKE_BUDGET)?;
    let source = if compiler.is_some() {
        format!("{compiled}/30 compiled with solc")
    } else {
        "no compiler found, manifest bytecode used".to_string()
    };
    Ok(format!("{source}, 2 cells, test size {test_size}, {:.1}s", start.elapsed().as_secs_f64()))
}

/// Needs the assembled corpus, a pretrained encoder directory and a remote
/// embedding endpoint, named by environment variables.
fn criterion_8() -> Verdict {
    let manifest = std::env::var_os("SCVD_FULL_MANIFEST").map(PathBuf::from);
    let encoder = std::env::var_os("SCVD_PRETRAINED_ENCODER").map(PathBuf::from);
    let remote = std::env::var_os("SCVD_EMBEDDING_URL").is_some();
    let (Some(manifest), Some(encoder), true) = (manifest, encoder, remote) else {
        return Verdict::NotRun(
            "needs SCVD_FULL_MANIFEST, SCVD_PRETRAINED_ENCODER and SCVD_EMBEDDING_URL (full corpus, encoder weights, embedding service)"
                .into(),
        );
    };
    let run = || -> Check {
        let workspace = std::env::var_os("SCVD_FULL_WORKSPACE")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("scvd-full-scale"));
        let mut config = PipelineConfig { manifest, workspace, ..Default::default() };
        config.embedding.provider = ProviderKind::Remote;
        config.model.encoder_preset = EncoderPreset::Pretrained { path: encoder };
        let records = load_manifest(&config.manifest).map_err(|e| e.to_string())?;
        let features = pipeline::materialize(&config, &records).map_err(|e| e.to_string())?;
        ensure(features.failure_fraction() <= config.failure_threshold, || {
            format!("{} of {} records failed", features.failed.len(), features.total)
        })?;
        let summary = pipeline::ablation::<f32>(&config, |_| {}).map_err(|e| e.to_string())?;
        let vs: Vec<f64> = summary
            .cells
            .iter()
            .filter(|c| c.variant == Variant::VulnSense)
            .filter_map(|c| c.report().map(|r| r.accuracy))
            .collect();
        ensure(vs.len() == config.ablation.epochs.len(), || "VulnSense cells failed".into())?;
        let worst = vs.iter().map(|a| (a - REFERENCE_ACCURACY).abs()).fold(0.0, f64::max);
        ensure(worst <= REFERENCE_TOL, || format!("VulnSense accuracies {vs:?}"))?;
        Ok(format!("VulnSense accuracies {vs:?} within ±{REFERENCE_TOL} of {REFERENCE_ACCURACY}"))
    };
    match run() {
        Ok(m) => Verdict::Pass(m),
        Err(m) => Verdict::Fail(m),
    }
}

fn guarded(f: fn() -> Check) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(m)) => Verdict::Pass(m),
        Ok(Err(m)) => Verdict::Fail(m),
        Err(_) => Verdict::Fail("panicked".into()),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (&'static str, Box<dyn Fn() -> Verdict>);
    let criteria: [Criterion; 8] = [
        ("1 opcode normalization", Box::new(|| guarded(criterion_1))),
        ("2 disassembler/CFG fuzz", Box::new(|| guarded(criterion_2))),
        ("3 shapes and simplex", Box::new(|| guarded(criterion_3))),
        ("4 gradient flow", Box::new(|| guarded(criterion_4))),
        ("5 overfit sanity", Box::new(|| guarded(criterion_5))),
        ("6 metric oracle", Box::new(|| guarded(criterion_6))),
        ("7 end-to-end smoke", Box::new(|| guarded(criterion_7))),
        ("8 full-scale reproduction", Box::new(criterion_8)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let line = match run() {
            Verdict::Pass(m) => format!("criterion {name}: pass ({m})"),
            Verdict::Fail(m) => {
                failed += 1;
                format!("criterion {name}: FAIL ({m})")
            }
            Verdict::NotRun(m) => format!("criterion {name}: not run ({m})"),
        };
        println!("{line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
