//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Tiers:
//! * property: always runs, a couple of minutes.
//! * smoke: one reduced run per experiment (seed 42). Runs by default;
//!   `MODADD_ACCEPTANCE_SMOKE=0` skips it. Completed runs are cached under
//!   the cargo target tmp dir, keyed by a fingerprint of the library
//!   sources, so they are reused only while the code is unchanged.
//! * full: 4 experiments x 3 seeds at full scale. Opt-in with
//!   `MODADD_ACCEPTANCE_FULL=1`; `MODADD_FULL_OUT` picks the output
//!   directory, so an existing `modadd reproduce --scale full` can be
//!   checked without retraining.
//!
//! A property failure always fails the process. Smoke and full criteria
//! measure training outcomes rather than invariants; their FAIL lines are
//! printed and counted, and they fail the process only with
//! `MODADD_ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{brute_consistency, model_error, primitive_error, scan_first_digit, FD_TOL, PRIMITIVES};
use modadd::evaluation::{eval_a, EvalSetup, Protocol};
use modadd::model::{Model, ModelConfig, PositionalMode};
use modadd::numerics::{Array, Graph};
use modadd::rendering::render;
use modadd::rng::Stream;
use modadd::runner::{reproduce_all, sha256_hex, Assets, ExperimentId, ResultsFile, Scale, SEEDS};
use modadd::task_data::{split, universe, Pair, MODULUS};
use modadd::tokenizer::{EXPR_CLOSE, EXPR_OPEN};
use modadd::training::{consistency_loss, curriculum_range};
use modadd::rendering::PositionRange;

#[derive(Default)]
struct Report {
    failed: usize,
    property_failed: usize,
}

impl Report {
    fn line(&mut self, tier: &str, name: &str, outcome: Option<bool>, detail: String) {
        let tag = match outcome {
            Some(true) => "PASS",
            Some(false) => {
                self.failed += 1;
                if tier == "property" {
                    self.property_failed += 1;
                }
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag:<4}  {tier:<8}  {name}: {detail}");
    }
}

fn main() {
    // `cargo test -- --list` and filters from other harnesses land here too.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let assets = Assets::builtin();
    let mut report = Report::default();
    let started = Instant::now();
    property_tier(&mut report, &assets);
    smoke_tier(&mut report, &assets);
    full_tier(&mut report, &assets);
    println!(
        "acceptance: {} failing criteria ({:.0} s)",
        report.failed,
        started.elapsed().as_secs_f64()
    );
    let strict = std::env::var("MODADD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if report.property_failed > 0 || (strict && report.failed > 0) {
        std::process::exit(1);
    }
}

fn property_tier(r: &mut Report, assets: &Assets) {
    const T: &str = "property";

    let mut worst: (f64, String) = (0.0, String::new());
    for op in PRIMITIVES {
        for seed in 0..20 {
            let e = primitive_error(op, seed);
            if e >= worst.0 {
                worst = (e, format!("{op} seed {seed}"));
            }
        }
    }
    for (mode, name) in [(PositionalMode::LearnedAbsolute, "model/learned"), (PositionalMode::Alibi, "model/alibi")] {
        for seed in 0..4 {
            let e = model_error(mode, seed);
            if e >= worst.0 {
                worst = (e, format!("{name} seed {seed}"));
            }
        }
    }
    r.line(
        T,
        "gradient oracle (11 primitives x 20 seeds, full model in both modes)",
        Some(worst.0 < FD_TOL),
        format!("worst relative error {:.2e} at {} (tolerance {FD_TOL:.0e})", worst.0, worst.1),
    );

    let mut rng = Stream::derived(3, "consistency-oracle");
    let mut max_diff: f64 = 0.0;
    for k in [2, 3, 4] {
        for _ in 0..100 {
            let n_groups = rng.inclusive(1, 3);
            let rows: Vec<Vec<f64>> = (0..n_groups * k).map(|_| (0..97).map(|_| rng.normal(2.0)).collect()).collect();
            let mut g = Graph::<f64>::new();
            let logits = g.leaf(Array::from_rows(&rows));
            let c = consistency_loss(&mut g, logits, k).unwrap();
            let want = brute_consistency(&rows, k);
            max_diff = max_diff.max((g.value(c).item() - want).abs() / want.max(1.0));
        }
    }
    r.line(
        T,
        "consistency-loss oracle (K in {2,3,4}, 100 groups each)",
        Some(max_diff <= 1e-6),
        format!("max relative |fast - double loop| = {max_diff:.2e}"),
    );

    let all: HashSet<Pair> = universe(MODULUS).unwrap().into_iter().collect();
    let bad: Vec<u64> = (42..142)
        .filter(|&seed| {
            let s = split(seed, MODULUS).unwrap();
            let train: HashSet<(u32, u32)> = s.train.iter().map(|p| (p.a, p.b)).collect();
            let union: HashSet<Pair> = s.train.iter().chain(&s.test).copied().collect();
            !(s.train.len() == 4704
                && s.test.len() == 4705
                && train.len() == 4704
                && s.test.iter().all(|p| !train.contains(&(p.a, p.b)))
                && union == all)
        })
        .collect();
    r.line(
        T,
        "split invariants (seeds 42-141)",
        Some(bad.is_empty()),
        format!("{} of 100 seeds violate disjointness/completeness/4704-4705 sizes", bad.len()),
    );

    let templates = assets.registry.templates();
    let mut rng = Stream::derived(1, "render-oracle");
    let (mut ok, mut exact, mut round_trip, mut anchors_single) = (0, 0, 0, 0);
    while ok < 10_000 {
        let pair = Pair::new(rng.below(97) as u32, rng.below(97) as u32, 97).unwrap();
        let t = &templates[rng.below(templates.len() as u64) as usize];
        let target = rng.inclusive(0, 70);
        let anchored = rng.below(2) == 1;
        let Ok(ex) = render(&pair, t, target, anchored, &mut rng) else { continue };
        ok += 1;
        exact += usize::from(scan_first_digit(&ex.text) == Some(target));
        let seq = assets.vocab.encode(&ex.text).unwrap();
        round_trip += usize::from(assets.vocab.decode(&seq).unwrap() == ex.text);
        let chars = ex.text.chars().count();
        let shrink = if anchored { EXPR_OPEN.len() + EXPR_CLOSE.len() - 2 } else { 0 };
        anchors_single += usize::from(seq.raw_len == chars - shrink);
    }
    r.line(
        T,
        "rendering position oracle (10,000 renders)",
        Some(exact == ok),
        format!("{exact}/{ok} first-digit scans equal the requested position"),
    );
    r.line(
        T,
        "tokenizer round-trip (10,000 rendered strings)",
        Some(round_trip == ok && anchors_single == ok),
        format!("{round_trip}/{ok} exact; anchors as single tokens in {anchors_single}/{ok}"),
    );

    let rg = |lo, hi| PositionRange { lo, hi };
    let table = [(0, rg(10, 30)), (1666, rg(10, 30)), (1667, rg(10, 50)), (3334, rg(10, 70))];
    let matches = table.iter().filter(|(s, want)| curriculum_range(*s).ok() == Some(*want)).count();
    r.line(
        T,
        "curriculum table (steps 0/1666/1667/3334)",
        Some(matches == table.len()),
        format!("{matches}/{} boundary steps match", table.len()),
    );

    let setup = EvalSetup::for_config(&ExperimentId::I1002a.spec(Scale::Full).train, &assets.registry).unwrap();
    let accs: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let model = Model::init(ModelConfig::default(), seed).unwrap();
            let s = split(seed, MODULUS).unwrap();
            eval_a(&model, &s, &setup, &Protocol::full(), &assets.vocab).unwrap().percent()
        })
        .collect();
    r.line(
        T,
        "untrained model near chance (Eval-A, seeds 42-44)",
        Some(accs.iter().all(|a| (0.0..=5.0).contains(a))),
        format!("Eval-A {accs:?}% (chance 1.03%)"),
    );
}

/// SHA-256 over the library sources and bundled assets.
fn source_fingerprint() -> String {
    fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                collect(&path, out);
            } else {
                out.push(path);
            }
        }
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut files = Vec::new();
    collect(&root.join("src"), &mut files);
    collect(&root.join("assets"), &mut files);
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend_from_slice(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        all.extend_from_slice(&fs::read(&f).unwrap());
    }
    sha256_hex(&all)
}

fn metric(results: &ResultsFile, id: ExperimentId, f: impl Fn(&modadd::evaluation::AggregateMetrics) -> Option<f64>) -> Option<f64> {
    results.experiments.get(id.as_str()).and_then(|e| f(&e.metrics))
}

fn pos(p: usize) -> impl Fn(&modadd::evaluation::AggregateMetrics) -> Option<f64> {
    move |m| m.eval_b_by_position.get(&p).map(|s| s.mean)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("missing".into(), |v| format!("{v:.1}%"))
}

fn smoke_tier(r: &mut Report, assets: &Assets) {
    const T: &str = "smoke";
    let names = [
        "baseline cliff (pos-0 >= 80%, pos-16 <= 10%)",
        "position steering (i1-001-1 pos-16 >= 60%)",
        "template steering order (Eval-C0 i1-002a > i1-001-1 > baseline)",
    ];
    if std::env::var("MODADD_ACCEPTANCE_SMOKE").is_ok_and(|v| v == "0") {
        for n in names {
            r.line(T, n, None, "MODADD_ACCEPTANCE_SMOKE=0".into());
        }
        return;
    }
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-smoke-{}", &source_fingerprint()[..16]));
    let specs: Vec<_> = [ExperimentId::Baseline001, ExperimentId::I1_001_1, ExperimentId::I1002a]
        .iter()
        .map(|id| id.spec(Scale::Smoke))
        .collect();
    let started = Instant::now();
    let results = match reproduce_all(&dir, &specs, &[42], assets) {
        Ok(res) => res,
        Err(e) => {
            for n in names {
                r.line(T, n, Some(false), format!("reproduce failed: {e}"));
            }
            return;
        }
    };
    println!(
        "      smoke     runs in {} ({:.0} s this invocation)",
        dir.display(),
        started.elapsed().as_secs_f64()
    );

    let (p0, p16) = (metric(&results, ExperimentId::Baseline001, pos(0)), metric(&results, ExperimentId::Baseline001, pos(16)));
    r.line(
        T,
        names[0],
        Some(p0.is_some_and(|v| v >= 80.0) && p16.is_some_and(|v| v <= 10.0)),
        format!("pos-0 {}, pos-16 {}", fmt(p0), fmt(p16)),
    );
    let s16 = metric(&results, ExperimentId::I1_001_1, pos(16));
    r.line(T, names[1], Some(s16.is_some_and(|v| v >= 60.0)), format!("pos-16 {}", fmt(s16)));
    let c0 = |id| metric(&results, id, |m| Some(m.eval_c0.mean));
    let (full, shift, base) = (c0(ExperimentId::I1002a), c0(ExperimentId::I1_001_1), c0(ExperimentId::Baseline001));
    let ordered = matches!((full, shift, base), (Some(f), Some(s), Some(b)) if f > s && s > b);
    r.line(
        T,
        names[2],
        Some(ordered),
        format!("i1-002a {}, i1-001-1 {}, baseline {}", fmt(full), fmt(shift), fmt(base)),
    );
}

fn full_tier(r: &mut Report, assets: &Assets) {
    const T: &str = "full";
    let names = [
        "baseline (Eval-A >= 90, Eval-B <= 25, Eval-C0 <= 10)",
        "i1-001-1 (Eval-A >= 90, Eval-B >= 60, pos16-pos64 each >= 90)",
        "i1-002a (Eval-A >= 90, C0 >= 65, C1 >= 85, CC@4 >= 85, pos0/pos8 below pos16+)",
        "i1-002-alibi (Eval-A <= 50)",
    ];
    if !std::env::var("MODADD_ACCEPTANCE_FULL").is_ok_and(|v| v == "1") {
        for n in names {
            r.line(T, n, None, "opt-in: MODADD_ACCEPTANCE_FULL=1".into());
        }
        return;
    }
    let dir = std::env::var_os("MODADD_FULL_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-full"));
    let specs: Vec<_> = ExperimentId::ALL.iter().map(|id| id.spec(Scale::Full)).collect();
    let results = match reproduce_all(&dir, &specs, &SEEDS, assets) {
        Ok(res) => res,
        Err(e) => {
            for n in names {
                r.line(T, n, Some(false), format!("reproduce failed: {e}"));
            }
            return;
        }
    };
    let get = |id, f: &dyn Fn(&modadd::evaluation::AggregateMetrics) -> Option<f64>| metric(&results, id, f);
    let a = |id| get(id, &|m| Some(m.eval_a.mean));
    let b = |id| get(id, &|m| Some(m.eval_b_overall.mean));
    let c0 = |id| get(id, &|m| Some(m.eval_c0.mean));
    let ge = |v: Option<f64>, t: f64| v.is_some_and(|v| v >= t);
    let le = |v: Option<f64>, t: f64| v.is_some_and(|v| v <= t);

    let id = ExperimentId::Baseline001;
    r.line(
        T,
        names[0],
        Some(ge(a(id), 90.0) && le(b(id), 25.0) && le(c0(id), 10.0)),
        format!("Eval-A {}, Eval-B {}, Eval-C0 {}", fmt(a(id)), fmt(b(id)), fmt(c0(id))),
    );

    let id = ExperimentId::I1_001_1;
    let late: Vec<Option<f64>> = [16, 24, 32, 48, 64].iter().map(|&p| get(id, &pos(p))).collect();
    r.line(
        T,
        names[1],
        Some(ge(a(id), 90.0) && ge(b(id), 60.0) && late.iter().all(|&v| ge(v, 90.0))),
        format!(
            "Eval-A {}, Eval-B {}, pos16-64 [{}]",
            fmt(a(id)),
            fmt(b(id)),
            late.iter().map(|&v| fmt(v)).collect::<Vec<_>>().join(", ")
        ),
    );

    let id = ExperimentId::I1002a;
    let c1 = get(id, &|m| m.eval_c1.as_ref().map(|s| s.mean));
    let cc4 = get(id, &|m| m.consistency_correct_4.as_ref().map(|s| s.mean));
    let early = [get(id, &pos(0)), get(id, &pos(8))];
    let late_min = [16, 24, 32, 48, 64]
        .iter()
        .filter_map(|&p| get(id, &pos(p)))
        .fold(f64::INFINITY, f64::min);
    let degraded = early.iter().all(|v| v.is_some_and(|v| v < late_min));
    r.line(
        T,
        names[2],
        Some(ge(a(id), 90.0) && ge(c0(id), 65.0) && ge(c1, 85.0) && ge(cc4, 85.0) && degraded),
        format!(
            "Eval-A {}, C0 {}, C1 {}, CC@4 {}, pos0 {}, pos8 {}, min pos16+ {late_min:.1}%",
            fmt(a(id)),
            fmt(c0(id)),
            fmt(c1),
            fmt(cc4),
            fmt(early[0]),
            fmt(early[1])
        ),
    );

    let id = ExperimentId::I1002Alibi;
    r.line(T, names[3], Some(le(a(id), 50.0)), format!("Eval-A {}", fmt(a(id))));
}
