use std::collections::BTreeMap;
use std::path::PathBuf;

use jsonschema::{Resource, Validator};
use pdhloop::linewidth::{self, PsdSource, PsdTrace};
use pdhloop::loopan::{self, Branch, MarginsReport};
use pdhloop::tfcore::{Pid, TransferModel};
use pdhloop::tuner::{self, TuneOptions, TuneResult};
use pdhloop::{presets, ExecMode};
use pdhloop_shell::ops::{self, EvaluateResponse, TraceKind, TuneRequest};
use pdhloop_shell::{fixtures, json, ProjectConfig};
use proptest::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(root().join(rel)).unwrap()
}

struct Schemas(BTreeMap<String, Value>);

impl Schemas {
    fn load() -> Self {
        let mut m = BTreeMap::new();
        for e in std::fs::read_dir(root().join("schemas")).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_stem().unwrap().to_str().unwrap().to_string();
            m.insert(name, serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap());
        }
        Schemas(m)
    }

    fn validator(&self, name: &str) -> Validator {
        let mut o = jsonschema::options();
        for s in self.0.values() {
            let id = s["$id"].as_str().unwrap().to_string();
            o = o.with_resource(id, Resource::from_contents(s.clone()).unwrap());
        }
        o.build(&self.0[name]).unwrap()
    }

    fn check(&self, name: &str, text: &str) {
        let v: Value = serde_json::from_str(text).unwrap();
        let errs: Vec<String> = self.validator(name).iter_errors(&v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
        assert!(errs.is_empty(), "{name}: {errs:?}");
    }
}

/// serialize, parse, serialize: the second text must equal the first.
fn fixed_point<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(v: &T) -> String {
    let a = json::to_string(v);
    let back: T = json::from_str(&a).unwrap();
    assert_eq!(&back, v);
    assert_eq!(json::to_string(&back), a);
    a
}

#[test]
fn shipped_fixtures_match_a_fresh_generation() {
    let all = fixtures::all().unwrap();
    let mut on_disk: Vec<_> = std::fs::read_dir(root().join("fixtures"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    on_disk.sort();
    let mut names: Vec<_> = all.iter().map(|(n, _)| n.clone()).collect();
    names.sort();
    assert_eq!(on_disk, names);
    for (name, text) in all {
        assert!(read(&format!("fixtures/{name}")) == text, "{name} differs from its generator");
    }
}

#[test]
fn schemas_are_well_formed() {
    let s = Schemas::load();
    assert!(s.0.len() >= 12);
    for (name, v) in &s.0 {
        assert!(v["$id"].as_str().unwrap().ends_with(&format!("/{name}.json")), "{name}");
        if name != "defs" {
            s.validator(name);
        }
    }
}

#[test]
fn configuration_documents_validate_and_round_trip() {
    let s = Schemas::load();
    for name in ["config1", "config2", "config3", "tuner_plant", "infeasible_plant"] {
        let text = read(&format!("fixtures/{name}.json"));
        s.check("project_config", &text);
        let cfg = ProjectConfig::parse(&text).unwrap();
        assert_eq!(fixed_point(&cfg), text);
    }
}

#[test]
fn computed_documents_validate_and_round_trip() {
    let s = Schemas::load();
    let cfg = fixtures::project(3);

    let ev = ops::evaluate(&cfg, ExecMode::Sequential).unwrap();
    s.check("evaluate_response", &fixed_point(&ev));
    s.check("bode_trace", &fixed_point(&ev.open_loop));
    s.check("margins_report", &fixed_point(&ev.margins));
    s.check("psd_trace", &fixed_point(ev.psd.as_ref().unwrap()));
    s.check("linewidth_report", &fixed_point(ev.linewidth_free_running.as_ref().unwrap()));

    for m in [cfg.loop_cfg.g_fast.clone(), cfg.loop_cfg.pd.clone(), TransferModel::Identity, TransferModel::Pid(Pid::new(1.0, 2.0, None))] {
        s.check("transfer_model", &fixed_point(&m));
    }
    let tab = TransferModel::Tabulated(pdhloop::tfcore::Tabulated::new(ev.closed_loop.clone()));
    s.check("transfer_model", &fixed_point(&tab));

    let b = ops::budget(&cfg, None, Some(presets::F_REF), Some(presets::MEASURED_ALPHA_PHASE_DEG)).unwrap();
    s.check("phase_budget", &fixed_point(&b));

    let fit = ops::ingest_ringdown(&read("fixtures/ringdown.csv"), None).unwrap();
    s.check("fit_report", &fixed_point(&fit));

    let ib = ops::ingest_bode(&read("fixtures/config3_closed_loop.csv"), TraceKind::Closed).unwrap();
    s.check("ingest_bode_response", &fixed_point(&ib));

    let (_, s4, base) = fixtures::spectra().unwrap();
    s.check("sy1_result", &fixed_point(&ops::sy1_from_sy4(&cfg, &s4, &base).unwrap()));

    s.check("cavity_advice", &fixed_point(&tuner::cavity_advisor(1e6, 1e4).unwrap()));
    s.check("tune_options", &fixed_point(&TuneOptions::default()));
}

#[test]
fn tuning_documents_validate_and_round_trip() {
    let s = Schemas::load();
    for cfg in [presets::tuner_plant(), presets::infeasible_plant()] {
        let r: TuneResult = tuner::autotune(&cfg, &TuneOptions::default()).unwrap();
        s.check("tune_result", &fixed_point(&r));
    }
    let req = TuneRequest { config: ProjectConfig::new(presets::tuner_plant()), options: TuneOptions::default() };
    s.check("tune_request", &fixed_point(&req));
    let minimal = format!("{{\"config\": {}}}", read("fixtures/tuner_plant.json"));
    s.check("tune_request", &minimal);
    let parsed: TuneRequest = json::from_str(&minimal).unwrap();
    assert_eq!(parsed.options, TuneOptions::default());
}

#[test]
fn oscillating_margins_validate() {
    let s = Schemas::load();
    let mut c = presets::tuner_plant();
    c.k_fast = Pid::new(1e3, 1e6, None);
    let m: MarginsReport = loopan::margins(&loopan::open_loop_trace(&c, Branch::Both, ExecMode::Sequential).unwrap());
    assert!(m.is_oscillating());
    s.check("margins_report", &fixed_point(&m));
}

#[tokio::test]
async fn service_errors_validate() {
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let s = Schemas::load();
    let dir = tempfile::tempdir().unwrap();
    let app = pdhloop_shell::service::router(pdhloop_shell::service::AppState::new(dir.path()));
    let bodies = [
        ("/evaluate", read("fixtures/config3.json").replace("\"delta_nu_c_Hz\": 45700.0", "\"delta_nu_c_Hz\": 0.0")),
        ("/ingest/bode?kind=closed", "frequency_Hz,gain_dB,phase_deg\n1,0,0\n2,0,0\n".to_string()),
        ("/ingest/ringdown", "nonsense".to_string()),
    ];
    for (uri, body) in bodies {
        let req = Request::builder().method("POST").uri(uri).body(axum::body::Body::from(body)).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        assert!(resp.status().is_client_error());
        let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
        s.check("error", &text);
    }
}

#[test]
fn schema_and_parser_reject_the_same_inputs() {
    let s = Schemas::load();
    let v = s.validator("project_config");
    let good = read("fixtures/config3.json");
    let bad = [
        good.replace("\"delta_nu_c_Hz\": 45700.0", "\"delta_nu_c_Hz\": 0.0"),
        good.replace("\"schema_version\": 1", "\"schema_version\": 2"),
        good.replace("\"lp_order\": 8", "\"lp_order\": 8, \"extra\": 1"),
        good.replace("\"tau_l_s\"", "\"tau_l\""),
        good.replace("\"kind\": \"pd_lockin\"", "\"kind\": \"pd\""),
    ];
    for text in bad {
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert!(!v.is_valid(&doc));
        assert!(ProjectConfig::parse(&text).is_err());
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e300f64..1e300,
        (-1e-300f64..1e-300),
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn floats_survive_the_document_path(k_p in finite(), f_i in finite(), f_d in proptest::option::of(finite())) {
        let m = TransferModel::Pid(Pid::new(k_p, f_i, f_d));
        let text = json::to_string(&m);
        let back: TransferModel = json::from_str(&text).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn psd_documents_round_trip(vals in prop::collection::vec(0.0f64..1e30, 1..20), rbw in proptest::option::of(1e-3f64..1e9)) {
        let f: Vec<f64> = (1..=vals.len()).map(|i| i as f64 * 1.5).collect();
        let t = PsdTrace::new(f, vals, rbw).unwrap();
        fixed_point(&t);
        let r = linewidth::beta_separation_linewidth(PsdSource::Trace(&t), 1.5, 1.5 * t.len().max(2) as f64);
        if let Ok(r) = r {
            fixed_point(&r);
        }
    }
}

#[test]
fn evaluate_response_matches_library() {
    let cfg = fixtures::project(1);
    let ev: EvaluateResponse = ops::evaluate(&cfg, ExecMode::Parallel).unwrap();
    let open = loopan::open_loop_trace(&cfg.loop_cfg, Branch::Both, ExecMode::Sequential).unwrap();
    assert_eq!(ev.open_loop, open);
    assert_eq!(ev.margins, loopan::margins(&open));
}
