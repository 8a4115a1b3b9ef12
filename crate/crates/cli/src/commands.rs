use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use etongue_core::edge::{
    endpoint_url, run_acquisition, upload_with, AcquisitionPlan, Clock, FixedClock, HttpResponse,
    HttpTransport, NeverStop, RetryPolicy, SystemClock, Transport,
};
use etongue_core::pipeline::evaluate_pack;
use etongue_core::scenario::{default_array, BUILTIN_PACK_NAMES};
use etongue_core::sensor::{scenario_source, simulate_acquisition, simulation_epoch};
use etongue_core::{AdcSpec, ArraySpec, Hyperparams, MeasurementRecord, Scenario, ScenarioPack, UploadError};
use etongue_service::{ClassificationResult, ModelDescriptor, ModelStatus, ServiceConfig};
use serde::Serialize;
use serde_json::{json, Value};
use uuid::Uuid;

use crate::{
    AcquireArgs, Cli, CliError, Command, EvaluateArgs, InferArgs, Output, ScenarioSelect, ScenariosArgs,
    ServeArgs, SimulateArgs, TrainArgs,
};

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<Output> {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(a) => simulate(a, seed),
        Command::Acquire(a) => acquire(a, seed),
        Command::Serve(a) => serve(a, cli.json),
        Command::Train(a) => train(a, seed),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Scenarios(a) => scenarios(a),
    }
}

fn resolve_pack(name_or_path: &str) -> CliResult<ScenarioPack> {
    ScenarioPack::resolve(name_or_path).map_err(|e| CliError::validation(e.to_string()))
}

struct Selection {
    array: ArraySpec,
    adc: AdcSpec,
    scenarios: Vec<Scenario>,
}

fn select(s: &ScenarioSelect) -> CliResult<Selection> {
    let pack = s.pack.as_deref().map(resolve_pack).transpose()?;
    let (array, adc) = match &pack {
        Some(p) => (p.array.clone(), p.adc),
        None => (default_array(), AdcSpec::default()),
    };
    let scenarios = match (&s.scenario, &pack) {
        (Some(f), _) if Path::new(f).is_file() => {
            vec![Scenario::load(Path::new(f)).map_err(|e| CliError::validation(e.to_string()))?]
        }
        (Some(name), Some(p)) => vec![p
            .find(name)
            .cloned()
            .ok_or_else(|| CliError::validation(format!("pack {} has no scenario {name:?}", p.name)))?],
        (Some(name), None) => {
            let found = BUILTIN_PACK_NAMES
                .iter()
                .filter_map(|n| ScenarioPack::builtin(n))
                .find_map(|p| p.find(name).cloned().map(|s| (p, s)));
            let (p, sc) = found.ok_or_else(|| {
                CliError::validation(format!(
                    "{name:?} is neither a scenario file nor a built-in scenario"
                ))
            })?;
            return Ok(Selection {
                array: p.array,
                adc: p.adc,
                scenarios: vec![sc],
            });
        }
        (None, Some(p)) => p.scenarios.clone(),
        (None, None) => return Err(CliError::validation("give --scenario, --pack, or both")),
    };
    Ok(Selection {
        array,
        adc,
        scenarios,
    })
}

fn write_record(path: &Path, r: &MeasurementRecord) -> CliResult<()> {
    let text = serde_json::to_string_pretty(r).expect("record serializes");
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))
}

#[derive(Serialize)]
struct Written {
    record_id: Uuid,
    label: Option<String>,
    file: String,
}

fn simulate(a: SimulateArgs, seed: u64) -> CliResult<Output> {
    let sel = select(&a.select)?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::internal(format!("creating {}: {e}", a.out.display())))?;
    let mut written = Vec::new();
    for sc in &sel.scenarios {
        for r in 0..sc.replicates {
            let record = simulate_acquisition(&sel.array, &sel.adc, &sc.replicate(seed, r))
                .map_err(|e| CliError::validation(e.to_string()))?;
            let file = a.out.join(format!("{}.json", record.record_id));
            write_record(&file, &record)?;
            written.push(Written {
                record_id: record.record_id,
                label: record.label.clone(),
                file: file.display().to_string(),
            });
        }
    }
    let mut text = String::new();
    for w in &written {
        let _ = writeln!(
            text,
            "{}  {:<6} {}",
            w.record_id,
            w.label.as_deref().unwrap_or("-"),
            w.file
        );
    }
    let _ = writeln!(text, "{} records written to {}", written.len(), a.out.display());
    Ok(Output::new(text, json!({"out": a.out, "records": written})))
}

fn acquire(a: AcquireArgs, seed: u64) -> CliResult<Output> {
    let sel = select(&a.select)?;
    let [scenario] = sel.scenarios.as_slice() else {
        return Err(CliError::validation(format!(
            "acquire runs one scenario; the selection has {} (add --scenario)",
            sel.scenarios.len()
        )));
    };
    let scenario = scenario.replicate(seed, 0);
    let (seeded_id, mut source) =
        scenario_source(&sel.array, &sel.adc, &scenario).map_err(|e| CliError::validation(e.to_string()))?;
    // Unpaced runs use a virtual clock and the seeded id, so they are
    // reproducible; paced runs are stamped with wall-clock time and a fresh id.
    let (record_id, mut clock): (Uuid, Box<dyn Clock>) = if a.time_scale == 0.0 {
        (seeded_id, Box::new(FixedClock::new(simulation_epoch())))
    } else {
        (Uuid::new_v4(), Box::new(SystemClock))
    };
    let plan = AcquisitionPlan {
        record_id,
        device_id: a.device_id.clone(),
        baseline_s: scenario.baseline_duration,
        sample_s: scenario.sample_duration,
        time_scale: a.time_scale,
        label: a.label.clone(),
        location: None,
        adc: sel.adc,
    };
    let immersion = plan
        .frame_counts(sel.adc.sample_rate)
        .map_err(|e| CliError::validation(e.to_string()))?
        .0;
    let record = run_acquisition(&mut source, &plan, clock.as_mut(), &NeverStop, |f| {
        if f.seq == immersion {
            log::info!("immersion at frame {}", f.seq);
        }
    })
    .map_err(|e| CliError::validation(e.to_string()))?;
    record
        .validate()
        .map_err(|e| CliError::internal(format!("acquired record is invalid: {e}")))?;
    if let Some(out) = &a.out {
        write_record(out, &record)?;
    }

    let policy = RetryPolicy {
        max_attempts: a.attempts.max(1),
        ..RetryPolicy::default()
    };
    let transport = HttpTransport::default();
    let mut rng = etongue_core::seeded_rng(seed);
    let receipt = upload_with(
        &record,
        &a.endpoint,
        &policy,
        &transport,
        &mut std::thread::sleep,
        &mut rng,
    )
    .map_err(|e| match e {
        UploadError::Rejected { .. } => CliError::validation(e.to_string()),
        UploadError::Exhausted { .. } | UploadError::BadResponse(_) => CliError::transport(e.to_string()),
    })?;
    let text = format!(
        "record {} ({} frames, immersion at {}) {} after {} attempt(s)\n",
        record.record_id,
        record.frames.len(),
        record.immersion_index,
        if receipt.duplicate {
            "already stored"
        } else {
            "stored"
        },
        receipt.attempts
    );
    Ok(Output::new(
        text,
        json!({
            "record_id": record.record_id,
            "frames": record.frames.len(),
            "immersion_index": record.immersion_index,
            "label": record.label,
            "attempts": receipt.attempts,
            "duplicate": receipt.duplicate,
        }),
    ))
}

fn serve(a: ServeArgs, json_mode: bool) -> CliResult<Output> {
    let packs = a
        .packs
        .iter()
        .map(|p| resolve_pack(p))
        .collect::<CliResult<Vec<_>>>()?;
    let config = ServiceConfig {
        addr: a.addr,
        data_dir: a.data.clone(),
        packs,
    };
    let state = etongue_service::AppState::open(&config).map_err(|e| CliError::internal(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::internal(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.addr)
            .await
            .map_err(|e| CliError::transport(format!("binding {}: {e}", config.addr)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::internal(e.to_string()))?;
        if json_mode {
            println!(
                "{}",
                json!({"listening": format!("http://{addr}"), "data": config.data_dir})
            );
        } else {
            println!("listening on http://{addr}");
        }
        etongue_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::internal(e.to_string()))
    })?;
    Ok(Output::new("", json!({"stopped": true})))
}

fn check(resp: Result<HttpResponse, String>, endpoint: &str) -> CliResult<(u16, Value)> {
    let resp = resp.map_err(|e| CliError::transport(format!("{endpoint}: {e}")))?;
    let body = serde_json::from_str(&resp.body).unwrap_or(Value::String(resp.body));
    match resp.status {
        200..=299 => Ok((resp.status, body)),
        400..=499 => {
            let message = body["message"]
                .as_str()
                .map_or_else(|| body.to_string(), str::to_string);
            Err(CliError::validation(format!("HTTP {}: {message}", resp.status)))
        }
        s => Err(CliError::internal(format!("HTTP {s}: {body}"))),
    }
}

fn parse<T: serde::de::DeserializeOwned>(v: Value) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::internal(format!("unexpected response: {e}")))
}

fn train(a: TrainArgs, seed: u64) -> CliResult<Output> {
    let transport = HttpTransport::default();
    let body = json!({
        "label_filter": if a.labels.is_empty() { None } else { Some(&a.labels) },
        "hyperparams": Hyperparams { n_trees: a.trees, ..Hyperparams::default() },
        "seed": seed,
    });
    let url = endpoint_url(&a.endpoint, "/v1/models:train");
    let (_, d) = check(transport.post_json(&url, &body.to_string()), &a.endpoint)?;
    let mut d: ModelDescriptor = parse(d)?;
    let deadline = Instant::now() + Duration::from_secs(a.timeout);
    while !a.no_wait && d.status == ModelStatus::Training {
        if Instant::now() > deadline {
            return Err(CliError::transport(format!(
                "model {} still training after {} s",
                d.model_id, a.timeout
            )));
        }
        std::thread::sleep(Duration::from_millis(200));
        let url = endpoint_url(&a.endpoint, &format!("/v1/models/{}", d.model_id));
        d = parse(check(transport.get(&url), &a.endpoint)?.1)?;
    }
    if d.status == ModelStatus::Failed {
        return Err(CliError::internal(format!(
            "training model {} failed: {}",
            d.model_id,
            d.error.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(Output::new(describe_model(&d), &d))
}

fn describe_model(d: &ModelDescriptor) -> String {
    let mut t = String::new();
    let status = serde_json::to_value(d.status).unwrap();
    let _ = writeln!(t, "model {} [{}]", d.model_id, status.as_str().unwrap_or("?"));
    let _ = writeln!(
        t,
        "{} records x {} features, classes {}, {} trees, seed {}",
        d.n_training_records,
        d.n_features,
        d.classes.join(", "),
        d.hyperparams.n_trees,
        d.hyperparams.seed
    );
    if let (Some(acc), Some(cm)) = (d.loocv_accuracy, &d.confusion_matrix) {
        let (k, n) = cm.accuracy_ratio();
        let _ = writeln!(t, "LOOCV accuracy {acc:.3} ({k}/{n})");
        let _ = write!(t, "{cm}");
    }
    t
}

fn infer(a: InferArgs) -> CliResult<Output> {
    let body = match Uuid::parse_str(&a.record) {
        Ok(id) => json!({"record_id": id}),
        Err(_) => {
            let text = std::fs::read_to_string(&a.record).map_err(|e| {
                CliError::validation(format!(
                    "--record is neither a record id nor a readable file: {e}"
                ))
            })?;
            let record: MeasurementRecord = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("{}: {e}", a.record)))?;
            json!({"record": record})
        }
    };
    let url = endpoint_url(&a.endpoint, &format!("/v1/models/{}:infer", a.model));
    let (_, v) = check(
        HttpTransport::default().post_json(&url, &body.to_string()),
        &a.endpoint,
    )?;
    let res: ClassificationResult = parse(v)?;
    let mut t = String::new();
    let _ = writeln!(
        t,
        "record {}: {} (confidence {:.3}, {:.1} ms)",
        res.record_id, res.top_class, res.confidence, res.latency_ms
    );
    for (class, p) in &res.likelihoods {
        let bar = "#".repeat((p * 40.0).round() as usize);
        let _ = writeln!(t, "  {class:<8} {p:.3} {bar}");
    }
    let mut sims = res.similarities.clone();
    sims.sort_by(|x, y| y.similarity.total_cmp(&x.similarity));
    let _ = writeln!(t, "most similar training records:");
    for s in sims.iter().take(5) {
        let _ = writeln!(t, "  {} {:.3}", s.record_id, s.similarity);
    }
    Ok(Output::new(t, &res))
}

fn evaluate(a: EvaluateArgs, seed: u64) -> CliResult<Output> {
    let pack = resolve_pack(&a.scenario_pack)?;
    let h = Hyperparams {
        n_trees: a.trees,
        ..Hyperparams::default()
    };
    let ev = evaluate_pack(&pack, seed, &h).map_err(|e| CliError::validation(e.to_string()))?;
    let mut t = String::new();
    let _ = writeln!(
        t,
        "pack {}, seed {}: {} records x {} features, {} trees",
        ev.pack, ev.seed, ev.n_records, ev.n_features, ev.hyperparams.n_trees
    );
    let (k, n) = ev.confusion_matrix.accuracy_ratio();
    let _ = writeln!(t, "LOOCV accuracy {:.3} ({k}/{n})", ev.loocv_accuracy);
    let _ = write!(t, "{}", ev.confusion_matrix);
    let imp = &ev.importance;
    let _ = writeln!(
        t,
        "feature importance, within-channel index < {} vs >= {}:",
        imp.cutoff, imp.cutoff
    );
    let _ = writeln!(
        t,
        "  index < {:<3}  {:>3} features  mass {:.3}  mean {:.5}",
        imp.cutoff, imp.early_features, imp.early_mass, imp.early_mean
    );
    let _ = writeln!(
        t,
        "  index >= {:<2}  {:>3} features  mass {:.3}  mean {:.5}",
        imp.cutoff, imp.late_features, imp.late_mass, imp.late_mean
    );
    let _ = writeln!(t, "  per-feature ratio {:.2}", imp.ratio());
    Ok(Output::new(t, &ev))
}

#[derive(Serialize)]
struct ScenarioInfo {
    name: String,
    description: Option<String>,
    replicates: u32,
    rng_seed: u64,
    baseline_duration: f64,
    sample_duration: f64,
}

#[derive(Serialize)]
struct PackInfo {
    name: String,
    scenarios: Vec<ScenarioInfo>,
}

fn scenarios(a: ScenariosArgs) -> CliResult<Output> {
    let packs: Vec<ScenarioPack> = match &a.pack {
        Some(p) => vec![resolve_pack(p)?],
        None => BUILTIN_PACK_NAMES
            .iter()
            .filter_map(|n| ScenarioPack::builtin(n))
            .collect(),
    };
    if let Some(dir) = &a.export {
        let [pack] = packs.as_slice() else {
            return Err(CliError::validation("--export needs --pack"));
        };
        pack.write(dir)
            .map_err(|e| CliError::internal(format!("writing {}: {e}", dir.display())))?;
        return Ok(Output::new(
            format!("pack {} written to {}\n", pack.name, dir.display()),
            json!({"pack": pack.name, "dir": dir}),
        ));
    }
    let info: Vec<PackInfo> = packs
        .iter()
        .map(|p| PackInfo {
            name: p.name.clone(),
            scenarios: p
                .scenarios
                .iter()
                .map(|s| ScenarioInfo {
                    name: s.name.clone(),
                    description: s.description.clone(),
                    replicates: s.replicates,
                    rng_seed: s.rng_seed,
                    baseline_duration: s.baseline_duration,
                    sample_duration: s.sample_duration,
                })
                .collect(),
        })
        .collect();
    let mut t = String::new();
    for p in &info {
        let _ = writeln!(t, "{}", p.name);
        for s in &p.scenarios {
            let _ = writeln!(
                t,
                "  {:<6} x{:<3} {}",
                s.name,
                s.replicates,
                s.description.as_deref().unwrap_or("")
            );
        }
    }
    Ok(Output::new(t, &info))
}
