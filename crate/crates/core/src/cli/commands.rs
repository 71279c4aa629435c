use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{runtime, AttestArgs, CliError, Command, EvalArgs, GenArgs, HandshakeArgs, Run, StageArgs};
use crate::attestor::{AttestationContext, ContextConfig, SimulatedSram};
use crate::container::{self, Metadata};
use crate::evalkit::{self, DeviceRole, FirmwareTraces};
use crate::exec;
use crate::handshake::network::{self, Adversary, Game, GameFixture, SessionOutcome, INITIATOR_ID};
use crate::handshake::script::{parse_device_id, AdversaryScript};
use crate::pipeline;
use crate::quantize::{size_report, QuantizedModel};
use crate::rng;
use crate::secure_channel::{Clock, KeyStore, NonceSource};
use crate::threshold::CalibrationResult;
use crate::trace::{self, mutate_profile, AggregatedTrace, FirmwareProfile, MutationKind};

pub(super) fn dispatch(cmd: &Command, run: &Run) -> Result<(), CliError> {
    match cmd {
        Command::Gen(a) => gen(run, a),
        Command::Train(a) => train(run, a),
        Command::Quantize(a) => quantize(run, a),
        Command::Calibrate(a) => calibrate(run, a),
        Command::Attest(a) => attest(run, a),
        Command::Handshake(a) => handshake(run, a),
        Command::Eval(a) => eval(run, a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn header(run: &Run) -> Vec<String> {
    run.provenance.lines()
}

fn commented(run: &Run, body: &str) -> String {
    let mut s: String = header(run).iter().map(|l| format!("# {l}\n")).collect();
    s.push_str(body);
    s
}

fn metadata(run: &Run, profile: &FirmwareProfile) -> Metadata {
    let mut m = run.provenance.metadata();
    m.insert("firmware_id".into(), profile.firmware_id.clone());
    m
}

fn check_index(run: &Run, index: usize) -> Result<(), CliError> {
    let n = run.config.experiment.firmware_count;
    if index >= n {
        return Err(CliError::Config(format!("--index {index}: suite has {n} firmware")));
    }
    Ok(())
}

fn traces(run: &Run, index: usize, role: DeviceRole, count: usize) -> Result<FirmwareTraces, CliError> {
    check_index(run, index)?;
    evalkit::collect_firmware(&run.config.experiment, index, role, count, run.mode).map_err(runtime)
}

fn gen(run: &Run, _: &GenArgs) -> Result<(), CliError> {
    let cfg = &run.config.experiment;
    let dir = run.ensure_dir("traces")?;
    let suite = evalkit::collect_suite(cfg, DeviceRole::Training, cfg.pipeline.safe_traces, run.mode).map_err(runtime)?;
    let hdr = header(run);
    for f in &suite.firmware {
        let id = &f.profile.firmware_id;
        write(&dir.join(format!("{id}.profile.toml")), commented(run, &f.profile.to_text()).as_bytes())?;
        for m in &f.mutants {
            let mu = m.mutation.as_ref().expect("mutant");
            let name = format!("{id}.{}-{}.profile.toml", mu.kind.as_str(), mu.severity);
            write(&dir.join(name), commented(run, &m.to_text()).as_bytes())?;
        }
        trace::export_aggregated(&dir.join(format!("{id}.safe.csv")), &f.safe, &hdr).map_err(runtime)?;
        trace::export_aggregated(&dir.join(format!("{id}.mutated.csv")), &f.mutated, &hdr).map_err(runtime)?;
        println!("{id}: {} safe, {} mutated traces, l = {}", f.safe.len(), f.mutated.len(), f.safe[0].features.len());
    }
    println!("wrote {}", dir.display());
    Ok(())
}

struct Stage {
    profile: FirmwareProfile,
    dataset: trace::Dataset,
}

fn stage_data(run: &Run, a: &StageArgs) -> Result<Stage, CliError> {
    check_index(run, a.index)?;
    let cfg = &run.config.experiment;
    let profile = evalkit::firmware_profile(cfg, a.index).map_err(runtime)?;
    let safe: Vec<AggregatedTrace> = match &a.input {
        Some(p) => trace::import_aggregated(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
        None => {
            let dev = evalkit::device_seed(cfg, a.index, DeviceRole::Training);
            let used = cfg.pipeline.used_len(&profile);
            pipeline::collect(&profile, dev, 0..cfg.pipeline.safe_traces as u64, cfg.pipeline.block, used, run.mode).map_err(runtime)?
        }
    };
    let dataset = pipeline::prepare_dataset(&safe, &[], &cfg.pipeline, evalkit::train_seed(cfg, a.index)).map_err(runtime)?;
    Ok(Stage { profile, dataset })
}

fn model_path(run: &Run, profile: &FirmwareProfile, kind: &str) -> PathBuf {
    run.path("models").join(format!("{}.{kind}.lam", profile.firmware_id))
}

fn calibration_path(run: &Run, profile: &FirmwareProfile) -> PathBuf {
    run.path("calibration").join(format!("{}.txt", profile.firmware_id))
}

fn train(run: &Run, a: &StageArgs) -> Result<(), CliError> {
    let st = stage_data(run, a)?;
    let model = pipeline::fit_float(&st.dataset, &run.config.experiment.pipeline, evalkit::train_seed(&run.config.experiment, a.index)).map_err(runtime)?;
    run.ensure_dir("models")?;
    let path = model_path(run, &st.profile, "float");
    container::save(&path, &container::write_float(&model, &metadata(run, &st.profile))).map_err(runtime)?;
    if let Some(m) = &model.train_meta {
        println!("{} {}: final train mse {:.6e} after {} epochs", st.profile.firmware_id, model.arch, m.final_train_mse, m.epochs);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn quantize(run: &Run, a: &StageArgs) -> Result<(), CliError> {
    let st = stage_data(run, a)?;
    let src = a.model.clone().unwrap_or_else(|| model_path(run, &st.profile, "float"));
    let (model, _) = container::load(&src).and_then(|c| c.into_float()).map_err(|e| runtime(format!("{}: {e}", src.display())))?;
    let q = pipeline::quantize_on(&model, &st.dataset).map_err(runtime)?;
    let size = size_report(&model, &q).map_err(runtime)?;
    run.ensure_dir("models")?;
    let path = model_path(run, &st.profile, "int8");
    container::save(&path, &container::write_quantized(&q, &metadata(run, &st.profile))).map_err(runtime)?;
    println!(
        "parameter payload {} -> {} bytes (x{:.3}); whole model {} -> {} bytes (x{:.3})",
        size.float_payload, size.quant_payload, size.payload_reduction_factor, size.float_bytes, size.quant_bytes, size.reduction_factor
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn calibrate(run: &Run, a: &StageArgs) -> Result<(), CliError> {
    let st = stage_data(run, a)?;
    let src = a.model.clone().unwrap_or_else(|| model_path(run, &st.profile, "int8"));
    let (q, _) = container::load(&src).and_then(|c| c.into_quantized()).map_err(|e| runtime(format!("{}: {e}", src.display())))?;
    let cal = pipeline::calibrate_on(&q, &st.dataset).map_err(runtime)?;
    run.ensure_dir("calibration")?;
    let path = calibration_path(run, &st.profile);
    write(&path, commented(run, &cal.to_record()).as_bytes())?;
    println!("{cal}");
    println!("wrote {}", path.display());
    Ok(())
}

fn load_quantized(model: &Path, calibration: &Path) -> Result<(QuantizedModel, CalibrationResult), CliError> {
    let (q, meta) = container::load(model)
        .and_then(|c| c.into_quantized())
        .map_err(|e| runtime(format!("{}: {e} (run `quantize` first)", model.display())))?;
    let cal = match Some(calibration) {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            CalibrationResult::from_record(&text).map_err(|e| runtime(format!("{}: {e}", p.display())))?
        }
        _ => container::calibration_from(&meta).ok_or_else(|| runtime("no calibration record (run `calibrate` first)"))?,
    };
    Ok((q, cal))
}

fn parse_mutation(s: &str) -> Result<(MutationKind, f64), CliError> {
    let bad = || CliError::Config(format!("--mutate {s}: expected <kind>:<severity>"));
    let (k, v) = s.split_once(':').ok_or_else(bad)?;
    let kind: MutationKind = k.parse().map_err(|e: trace::TraceError| CliError::Config(e.to_string()))?;
    let sev: f64 = v.parse().map_err(|_| bad())?;
    Ok((kind, sev))
}

fn attest(run: &Run, a: &AttestArgs) -> Result<(), CliError> {
    check_index(run, a.index)?;
    let cfg = &run.config.experiment;
    let profile = evalkit::firmware_profile(cfg, a.index).map_err(runtime)?;
    let model = a.model.clone().unwrap_or_else(|| model_path(run, &profile, "int8"));
    let (q, cal) = load_quantized(&model, &calibration_path(run, &profile))?;
    let running = match &a.mutate {
        Some(m) => {
            let (kind, sev) = parse_mutation(m)?;
            mutate_profile(&profile, kind, sev, rng::derive(cfg.seed, rng::tag("attest-mutation"))).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => profile.clone(),
    };
    let peer = parse_device_id(&a.peer).map_err(CliError::Config)?;
    let report = match &a.report {
        Some(h) => Some(hex::decode(h).map_err(|e| CliError::Config(format!("--report: {e}")))?),
        None => None,
    };
    let keys = KeyStore::generate(&[INITIATOR_ID, peer], &mut NonceSource::seeded(rng::derive(cfg.seed, rng::tag("keys"))));
    let dev = evalkit::device_seed(cfg, a.index, DeviceRole::Deployed);
    let start = rng::derive(dev, rng::tag("step")) % cfg.pipeline.safe_traces as u64;
    let mut ctx = AttestationContext::new(ContextConfig {
        self_id: INITIATOR_ID,
        qmodel: Arc::new(q),
        t_opt: cal.t_opt,
        peer_keys: keys.inner_keys_for(INITIATOR_ID),
        epsilon_ms: run.config.protocol.epsilon_ms,
        clock: Clock::simulated(1_000_000),
        nonces: NonceSource::seeded(rng::derive(cfg.seed, rng::tag("attest"))),
        block: cfg.pipeline.block,
        sram: Box::new(SimulatedSram::new(running.clone(), dev, start)),
    })
    .map_err(runtime)?;
    let sender = if a.no_sender { None } else { Some(peer) };
    let out = ctx.app_sa(sender, report.as_deref(), !a.no_self).map_err(runtime)?;
    let c = ctx.counters();
    let body = format!(
        "firmware={}\nrunning={}\nmutated={}\noutcome={:?}\nline={}\ndelta_s={}\nreport={}\ninference_calls={}\nencryption_calls={}\ndecryption_calls={}\n",
        profile.firmware_id,
        running.firmware_id,
        running.is_mutated(),
        out.kind,
        out.algorithm_line(),
        out.delta_s.map_or("none".to_string(), |v| format!("{v:?}").to_lowercase()),
        out.report.as_ref().map_or("none".to_string(), |r| r.to_hex()),
        c.inference,
        c.encryption,
        c.decryption,
    );
    print!("{body}");
    let dir = run.ensure_dir("attest")?;
    write(&dir.join(format!("{}.txt", profile.firmware_id)), commented(run, &body).as_bytes())
}

fn fixture(run: &Run, index: usize) -> Result<GameFixture, CliError> {
    let cfg = &run.config.experiment;
    let f = traces(run, index, DeviceRole::Training, cfg.pipeline.safe_traces)?;
    let tf = pipeline::train_on(&f.profile, &f.safe, &[], &cfg.pipeline, evalkit::train_seed(cfg, index)).map_err(runtime)?;
    let strongest = f.mutants.iter().map(|m| m.mutation.as_ref().map_or(0.0, |x| x.severity)).fold(0.0, f64::max);
    let unsafe_profiles = f.mutants.iter().filter(|m| m.mutation.as_ref().is_some_and(|x| x.severity == strongest)).cloned().collect();
    Ok(GameFixture {
        profile: f.profile,
        qmodel: Arc::new(tf.qmodel),
        t_opt: tf.calibration.t_opt,
        block: cfg.pipeline.block,
        epsilon_ms: run.config.protocol.epsilon_ms,
        step_range: cfg.pipeline.safe_traces as u64,
        unsafe_profiles,
    })
}

fn handshake(run: &Run, a: &HandshakeArgs) -> Result<(), CliError> {
    let p = &run.config.protocol;
    let game = match &a.game {
        Some(g) => Some(Game::ALL.into_iter().find(|x| x.as_str() == g).ok_or_else(|| CliError::Config(format!("--game: unknown game `{g}`")))?),
        None => None,
    };
    let script = match &p.adversary {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            text.parse::<AdversaryScript>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => AdversaryScript::passthrough(),
    };
    let fx = fixture(run, a.index)?;
    let seed = run.config.experiment.seed;
    let (name, outcomes): (String, Vec<SessionOutcome>) = match game {
        Some(g) => {
            let (_, o) = network::play(g, &fx, p.sessions, seed, run.mode).map_err(runtime)?;
            (g.as_str().to_string(), o)
        }
        None => {
            let hop = p.hop_ms;
            let o = exec::map_range(run.mode, p.sessions, |k| {
                let s = rng::derive_all(seed, &[rng::tag("handshake"), k as u64]);
                let (mut i, mut j, mut net) = network::device_pair(&fx, s)?;
                net.hop_ms = hop;
                let mut adv = Adversary::new(script.clone(), rng::derive(s, rng::tag("adversary")));
                Ok(network::run_session(&net, k as u64, &mut i, &mut j, &mut adv))
            })
            .into_iter()
            .collect::<Result<Vec<_>, crate::attestor::AttestError>>()
            .map_err(runtime)?;
            ("handshake".to_string(), o)
        }
    };
    let wins = outcomes.iter().filter(|o| o.verdict.adversary_wins()).count();
    let completed = outcomes.iter().filter(|o| o.verdict.completed).count();
    let verdict = if wins == 0 { "no-win" } else { "win" };
    for o in &outcomes {
        println!("session {}: {} ({})", o.session_id, o.verdict.label(), o.failure().map_or("none", |r| r.as_str()));
    }
    println!("sessions={} completed={completed} adversary_wins={wins} verdict={verdict}", outcomes.len());
    let mut hdr = header(run);
    match game {
        Some(g) => hdr.push(format!("game={}", g.as_str())),
        None => hdr.push(format!("script={}", script.to_string().trim_end().replace('\n', "; "))),
    }
    hdr.push(format!("sessions={} completed={completed} adversary_wins={wins}", outcomes.len()));
    hdr.push(format!("verdict={verdict}"));
    let records: Vec<_> = outcomes.into_iter().flat_map(|o| o.transcript).collect();
    let dir = run.ensure_dir("transcripts")?;
    let mut buf = Vec::new();
    network::write_transcript(&mut buf, &hdr, &records).map_err(runtime)?;
    write(&dir.join(format!("{name}.jsonl")), &buf)
}

fn eval(run: &Run, _: &EvalArgs) -> Result<(), CliError> {
    let dir = run.ensure_dir("eval")?;
    let report = evalkit::run_experiment(&run.config.experiment, &run.provenance, Some(&dir), run.mode).map_err(runtime)?;
    print!("{report}");
    println!("wrote {}", dir.display());
    Ok(())
}
