use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;

use opsim::format::{ir_to_json, load_hw, load_ir, load_passes, load_profile_db, load_program, profile_csv, program_to_json, read_csv, to_toml, HW_VERSION};
use opsim::scenario::{Scenario, Target};
use opsim::sweep::random_sweep;
use opsim::{Error, Result};
use opsim_core::engines::{roofline_records, ProfileRecord};
use opsim_core::graph::{build_block, derive_backward, ModelConfig, OpKind, OperatorGraph, Precision};
use opsim_core::run::ModelSource;
use opsim_core::sched::{NodeInstance, Program, RankProgram, Segment, SegmentOp, Stream};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn err_text<T>(r: Result<T>) -> (String, i32) {
    match r {
        Ok(_) => panic!("expected an error"),
        Err(e) => (e.to_string(), e.exit_code()),
    }
}

fn dense() -> impl Strategy<Value = ModelConfig> {
    (1u64..5, 1u64..4, 1u64..5, 1u64..3, 1u64..4, 1u64..5).prop_map(|(hd, h, f, l, b, s)| {
        let heads = 1 << h;
        ModelConfig::dense(16 * hd * heads, heads, 64 * f, l, b, 16 * s)
    })
}

fn round_trip_ir(g: &OperatorGraph) -> OperatorGraph {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "g.json", &ir_to_json(g).unwrap());
    load_ir(&p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ir_round_trips(cfg in dense(), backward in any::<bool>()) {
        let mut g = build_block(&cfg).unwrap();
        if backward {
            g = derive_backward(&g).unwrap();
        }
        prop_assert_eq!(round_trip_ir(&g), g);
    }

    #[test]
    fn profile_csv_round_trips(n in 1usize..40, seed in any::<u64>()) {
        let hw = load_hw(&shipped("h100x16.toml")).unwrap();
        let nodes: Vec<_> = random_sweep(n, seed).iter().map(|op| op.node().unwrap()).collect();
        let (records, _) = roofline_records(&hw, &nodes).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "db.csv", &profile_csv(&records).unwrap());
        let back: Vec<ProfileRecord> = read_csv(&p).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(load_profile_db(&p).unwrap().len(), records.len());
    }
}

#[test]
fn ir_document_layout() {
    let g = build_block(&ModelConfig::dense(64, 4, 128, 2, 1, 8)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&ir_to_json(&g).unwrap()).unwrap();
    assert_eq!(v["version"], "charon-ir/1");
    let node = &v["nodes"][0];
    for key in ["id", "kind", "inputs", "outputs", "phase"] {
        assert!(node.get(key).is_some(), "node lacks `{key}`: {node}");
    }
}

#[test]
fn ir_rejects_bad_documents() {
    let d = tempfile::tempdir().unwrap();
    let g = build_block(&ModelConfig::dense(64, 4, 128, 2, 1, 8)).unwrap();
    let good = ir_to_json(&g).unwrap();

    let p = write(d.path(), "v.json", &good.replace("charon-ir/1", "charon-ir/9"));
    let (msg, code) = err_text(load_ir(&p));
    assert!(msg.contains("charon-ir/1") && msg.contains("v.json"), "{msg}");
    assert_eq!(code, 2);

    let p = write(d.path(), "noversion.json", &good.replacen("\"version\": \"charon-ir/1\",", "", 1));
    assert!(err_text(load_ir(&p)).0.contains("version"));

    // Duplicate node ids.
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["nodes"][1]["id"] = v["nodes"][0]["id"].clone();
    let p = write(d.path(), "dup.json", &serde_json::to_string(&v).unwrap());
    assert_eq!(err_text(load_ir(&p)).1, 2);

    let p = write(d.path(), "broken.json", "{\"version\": \"charon-ir/1\", \"nodes\": [");
    assert!(matches!(load_ir(&p), Err(Error::Parse { .. })));
}

#[test]
fn program_round_trips() {
    let g = build_block(&ModelConfig::dense(64, 4, 128, 1, 1, 8)).unwrap();
    let n = g.nodes.len() as u32;
    let seg = |op, stream, deps| Segment { op, stream, deps, collective: None };
    let ranks = (0..2)
        .map(|r| RankProgram {
            rank: r,
            segments: (0..n)
                .map(|i| seg(SegmentOp::Node(NodeInstance { graph: 0, node: i, microbatch: r, layer: 0 }), Stream::Compute, vec![]))
                .chain([
                    seg(SegmentOp::Send { peer: 1 - r, tag: u64::from(r), bytes: 4096 }, Stream::Comm(0), vec![n - 1]),
                    seg(SegmentOp::Recv { peer: 1 - r, tag: u64::from(1 - r), bytes: 4096 }, Stream::Comm(0), vec![]),
                    seg(SegmentOp::Task { label: "opt".into(), duration_ns: 12.5 }, Stream::Compute, vec![n + 1]),
                ])
                .collect(),
        })
        .collect();
    let prog = Program { graphs: vec![g], ranks };
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "p.json", &program_to_json(&prog).unwrap());
    assert_eq!(load_program(&p).unwrap(), prog);
}

#[test]
fn hardware_round_trips() {
    let hw = load_hw(&shipped("h100x16.toml")).unwrap();
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "hw.toml", &to_toml(HW_VERSION, &hw).unwrap());
    assert_eq!(load_hw(&p).unwrap(), hw);
}

#[test]
fn hardware_validation() {
    let d = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(shipped("h100x16.toml")).unwrap();
    let p = write(d.path(), "hw.toml", &text.replace("charon-hw/1", "charon-hw/0"));
    assert_eq!(err_text(load_hw(&p)).1, 2);
    let mut hw = load_hw(&shipped("h100x16.toml")).unwrap();
    hw.mem_bandwidth = 0.0;
    let p = write(d.path(), "zero.toml", &to_toml(HW_VERSION, &hw).unwrap());
    assert_eq!(err_text(load_hw(&p)).1, 2);
}

#[test]
fn pass_files() {
    let specs = load_passes(&shipped("passes.toml")).unwrap();
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["canonicalize", "backward", "fuse", "recompute"]);

    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "p.toml", "version = \"charon-passes/1\"\n[[pass]]\nname = \"canonicalize\"\n[[pass]]\nname = \"teleport\"\n");
    let (msg, code) = err_text(load_passes(&p));
    assert!(msg.contains("teleport") && msg.contains("p.toml"), "{msg}");
    assert_eq!(code, 2);

    for (file, entry) in [("q.toml", "policy = \"full\""), ("r.toml", "params = { policy = \"sometimes\" }")] {
        let p = write(d.path(), file, &format!("version = \"charon-passes/1\"\n[[pass]]\nname = \"recompute\"\n{entry}\n"));
        assert_eq!(err_text(load_passes(&p)).1, 2, "{entry}");
    }

    let p = write(d.path(), "empty.toml", "version = \"charon-passes/1\"\n");
    assert!(load_passes(&p).unwrap().is_empty());
}

const HW: &str = "hardware = \"hw.toml\"\n";
const MODEL: &str = "[model]\nhidden_size = 128\nnum_heads = 4\nffn_hidden = 256\nnum_layers = 2\nbatch = 2\nseq_len = 32\n";

fn scenario_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::copy(shipped("h100x16.toml"), d.path().join("hw.toml")).unwrap();
    d
}

fn scenario(d: &Path, body: &str) -> Result<Scenario> {
    Scenario::load(&write(d, "s.toml", &format!("version = \"charon-scenario/1\"\n{body}")))
}

#[test]
fn scenario_rejections() {
    let d = scenario_dir();
    let g = build_block(&ModelConfig::dense(128, 4, 256, 2, 2, 32)).unwrap();
    write(d.path(), "block.json", &ir_to_json(&g).unwrap());
    let cases = [
        (HW.to_string(), "program"),
        (format!("{HW}program = \"p.json\"\n{MODEL}"), "mutually exclusive"),
        (format!("{HW}[model]\nir = \"block.json\"\nbatch = 4\n"), "not both"),
        (format!("{HW}[model]\nhidden_size = 128\n"), "num_heads"),
        (format!("{HW}{MODEL}[simulation]\ncontext = 64\n"), "context"),
        (format!("{HW}{MODEL}[simulation]\nprefill_chunk = 16\n"), "prefill_chunk"),
        (format!("{HW}{MODEL}[engines]\norder = \"crystal_ball\"\n"), "crystal_ball"),
        (format!("{HW}{MODEL}[simulaton]\n"), "simulaton"),
        (format!("hardware = \"nowhere.toml\"\n{MODEL}"), "nowhere.toml"),
    ];
    for (body, needle) in cases {
        let (msg, code) = err_text(scenario(d.path(), &body));
        assert!(msg.contains(needle), "`{needle}` not in `{msg}` for\n{body}");
        assert_eq!(code, 2);
    }
}

#[test]
fn scenario_defaults_and_paths() {
    let d = scenario_dir();
    fs::create_dir(d.path().join("sub")).unwrap();
    fs::copy(shipped("passes.toml"), d.path().join("sub/passes.toml")).unwrap();
    let s = scenario(d.path(), &format!("{HW}passes = \"sub/passes.toml\"\n{MODEL}[outputs]\nreport = \"r.json\"\n")).unwrap();
    assert_eq!(s.seed, 42);
    assert_eq!(s.outputs.report.as_deref(), Some(d.path().join("r.json").as_path()));
    let Target::Workload(w) = &s.target else { panic!("expected a workload") };
    assert_eq!(w.passes.len(), 4);
    let ModelSource::Config(c) = &w.model else { panic!("expected a config") };
    assert_eq!((c.num_kv_heads, c.head_dim, c.precision), (4, 32, Precision::Bf16));
}

#[test]
fn scenario_from_ir_matches_scenario_from_dimensions() {
    let d = scenario_dir();
    let cfg = ModelConfig::dense(128, 4, 256, 1, 2, 32);
    write(d.path(), "block.json", &ir_to_json(&build_block(&cfg).unwrap()).unwrap());
    let by_ir = scenario(d.path(), &format!("{HW}mode = \"prefill\"\n[model]\nir = \"block.json\"\n")).unwrap();
    let Target::Workload(w) = &by_ir.target else { panic!() };
    let ModelSource::Graph(g) = &w.model else { panic!("expected a graph") };
    assert!(g.nodes.iter().any(|n| n.kind == OpKind::Matmul));
    let (ir_report, _) = by_ir.run(&by_ir.stack().unwrap()).unwrap();
    let by_dims = scenario(d.path(), &format!("{HW}mode = \"prefill\"\n[model]\nhidden_size = 128\nnum_heads = 4\nffn_hidden = 256\nnum_layers = 1\nbatch = 2\nseq_len = 32\n")).unwrap();
    let (dim_report, _) = by_dims.run(&by_dims.stack().unwrap()).unwrap();
    assert!(ir_report.step_time_us > 0.0);
    assert_eq!(ir_report.operators.len(), dim_report.operators.len());
}
