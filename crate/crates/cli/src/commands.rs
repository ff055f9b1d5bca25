use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde_json::Value;
use syncrec_core::clock::{Clock, MonotonicClock};
use syncrec_core::epoch::{correct_recording, export_epochs, extract_epochs_matching};
use syncrec_core::experiment::{
    run_case1, run_case2, CaseOneConfig, CaseTwoConfig, ExperimentLink, LocalLink, LocalLinkConfig, ROBOT_SOURCE,
};
use syncrec_core::hub::{run_recorder, Hub, HubConfig};
use syncrec_core::model::{MarkerOrigin, MarkerSample, Sample, StreamInfo};
use syncrec_core::recorder::{read_recording_file, RecordingWriter};
use syncrec_core::sim::{
    execute_profile, plan_trajectory, AccelMode, DeviceConfig, DeviceKind, DeviceSim, TrajectoryMode,
};
use syncrec_core::wire::{SessionRole, SubscribeFilter};
use syncrec_net::{spawn_bridge, spawn_server, BridgeConfig, ProducerClient, RemoteLink, ServerConfig, ShiftedClock};

use crate::{
    Case1Args, Case2Args, Command, EpochArgs, ExperimentCommand, HubCommand, InjectArgs, InspectArgs, MarkerCommand,
    RunArgs, ServeArgs, SimArgs, SimKind,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Hub(HubCommand::Serve(a)) => serve(a),
        Command::Sim(a) => sim(a),
        Command::Experiment(ExperimentCommand::Case1(a)) => case1(a),
        Command::Experiment(ExperimentCommand::Case2(a)) => case2(a),
        Command::Epoch(a) => epoch(a),
        Command::Inspect(a) => inspect(a),
        Command::Marker(MarkerCommand::Inject(a)) => inject(a),
    }
}

/// Set on Ctrl-C; long-running commands poll it.
fn interrupt_flag() -> Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    Ok(stop)
}

fn should_stop(stop: &AtomicBool, start: Instant, duration: Option<f64>) -> bool {
    stop.load(Ordering::SeqCst) || duration.is_some_and(|d| start.elapsed().as_secs_f64() >= d)
}

fn serve(a: ServeArgs) -> Result<()> {
    if !(a.ping_interval > 0.0) {
        bail!("--ping-interval must be positive");
    }
    let stop = interrupt_flag()?;
    let hub = Hub::new(Arc::new(MonotonicClock::new()), HubConfig::default());
    let recorder = match &a.record {
        Some(path) => {
            let writer = RecordingWriter::create(path).with_context(|| format!("creating {}", path.display()))?;
            let sub = hub.subscribe(SubscribeFilter::All);
            Some(thread::spawn(move || run_recorder(sub, writer)))
        }
        None => None,
    };
    let cfg = ServerConfig { ping_interval: Duration::from_secs_f64(a.ping_interval), ..Default::default() };
    let server = spawn_server(hub.clone(), (a.bind.as_str(), a.port), cfg).context("binding hub port")?;
    info!("hub listening on {}", server.local_addr());
    let bridge = if a.no_bridge {
        None
    } else {
        let b = spawn_bridge(hub.clone(), (a.bind.as_str(), a.bridge_port), BridgeConfig::default())
            .context("binding bridge port")?;
        info!("monitor bridge on ws://{}", b.local_addr());
        Some(b)
    };
    let start = Instant::now();
    while !should_stop(&stop, start, a.duration) {
        thread::sleep(Duration::from_millis(50));
    }
    info!("shutting down");
    server.shutdown();
    if let Some(b) = bridge {
        b.shutdown();
    }
    hub.shutdown();
    if let Some(r) = recorder {
        let (_, footer) = r.join().map_err(|_| anyhow!("recorder thread panicked"))??;
        let total: u64 = footer.counts.values().sum();
        info!("recording finalized: {} streams, {total} samples and markers", footer.counts.len());
    }
    Ok(())
}

fn device_config(a: &SimArgs) -> Result<DeviceConfig> {
    let kind = match a.kind {
        SimKind::Gsr => DeviceKind::Gsr,
        SimKind::Ppg => DeviceKind::Ppg,
        SimKind::Ecg => DeviceKind::Ecg,
        SimKind::Mocap => DeviceKind::Mocap,
        SimKind::Robot => unreachable!(),
    };
    let mut cfg = match &a.config {
        Some(p) => {
            let mut v = read_json(p)?;
            if let Some(o) = v.as_object_mut() {
                o.entry("kind").or_insert_with(|| serde_json::to_value(kind).unwrap());
                o.entry("source_id").or_insert_with(|| Value::from(kind.name()));
                o.entry("rate").or_insert_with(|| Value::from(kind.default_rate()));
            }
            serde_json::from_value::<DeviceConfig>(v).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DeviceConfig::new(kind, kind.name()),
    };
    if cfg.kind != kind {
        bail!("config describes a {:?} device, not {:?}", cfg.kind, kind);
    }
    cfg.seed = a.seed;
    if let Some(r) = a.rate {
        cfg.rate = r;
    }
    if let Some(s) = &a.source {
        cfg.source_id = s.clone();
    }
    if !(cfg.rate > 0.0) {
        bail!("--rate must be positive");
    }
    Ok(cfg)
}

fn sim(a: SimArgs) -> Result<()> {
    let stop = interrupt_flag()?;
    let clock = Arc::new(ShiftedClock::new(Instant::now(), -a.clock_offset));
    if a.kind == SimKind::Robot {
        return sim_robot(&a, clock, &stop);
    }
    let cfg = device_config(&a)?;
    let info = cfg.stream_info();
    let client = ProducerClient::connect(&a.hub, &cfg.source_id, clock.clone())
        .with_context(|| format!("connecting to {}", a.hub))?;
    let id = client.declare(&info)?;
    info!("{} streaming as stream {id} at {} Hz", cfg.source_id, cfg.rate);
    let mut dev = DeviceSim::new(cfg, clock.now())?;
    let start = Instant::now();
    while !should_stop(&stop, start, a.duration) {
        thread::sleep(Duration::from_millis(20));
        let samples = dev.samples_until(clock.now());
        if !samples.is_empty() {
            client.push(id, samples)?;
        }
    }
    info!("sent {} samples", dev.produced());
    client.bye()?;
    Ok(())
}

/// Streams the arm going back and forth along the default fixed plan.
fn sim_robot(a: &SimArgs, clock: Arc<ShiftedClock>, stop: &AtomicBool) -> Result<()> {
    let base = match &a.config {
        Some(p) => {
            let mut v = read_json(p)?;
            if let Some(o) = v.as_object_mut() {
                o.entry("task_id").or_insert(Value::from(1));
            }
            serde_json::from_value::<CaseOneConfig>(v).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CaseOneConfig::new(syncrec_core::experiment::Task::One, ""),
    };
    let rate = a.rate.unwrap_or(base.robot_rate);
    if !(rate > 0.0) {
        bail!("--rate must be positive");
    }
    let plan = plan_trajectory(
        &base.pick,
        &base.place,
        &base.planes,
        TrajectoryMode::Fixed,
        AccelMode::Normal,
        &base.limits,
        a.seed,
    )?;
    let profile = execute_profile(&plan, 1.0 / rate)?;
    let n = plan.waypoints[0].len();
    let mut labels: Vec<String> = (1..=n).map(|i| format!("q{i}")).collect();
    labels.push("speed".into());
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let source = a.source.clone().unwrap_or_else(|| ROBOT_SOURCE.to_string());
    let info = StreamInfo::numeric("joints", &source, rate, &label_refs, "rad");
    let client =
        ProducerClient::connect(&a.hub, &source, clock.clone()).with_context(|| format!("connecting to {}", a.hub))?;
    let id = client.declare(&info)?;
    info!("robot streaming as stream {id} at {rate} Hz");
    let t0 = clock.now();
    let len = profile.samples.len();
    let mut k: u64 = 0;
    let start = Instant::now();
    while !should_stop(stop, start, a.duration) {
        thread::sleep(Duration::from_millis(20));
        let now = clock.now();
        let mut chunk = Vec::new();
        while t0 + k as f64 / rate < now {
            // forward, then the same path backwards
            let i = (k as usize) % (2 * len);
            let s = if i < len { &profile.samples[i] } else { &profile.samples[2 * len - 1 - i] };
            let mut v: Vec<f32> = s.q.iter().map(|x| *x as f32).collect();
            v.push(s.max_speed_deg() as f32);
            chunk.push(Sample::new(t0 + k as f64 / rate, v));
            k += 1;
        }
        if !chunk.is_empty() {
            client.push(id, chunk)?;
        }
    }
    client.bye()?;
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Config file merged with the command-line overrides.
fn scenario<T: serde::de::DeserializeOwned>(run: &RunArgs, overrides: &[(&str, Value)]) -> Result<T> {
    let mut v = match &run.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    let obj = v.as_object_mut().ok_or_else(|| anyhow!("scenario config must be a JSON object"))?;
    for (k, val) in overrides {
        obj.insert(k.to_string(), val.clone());
    }
    obj.insert("subject_id".into(), Value::from(run.subject.clone()));
    Ok(serde_json::from_value(v).context("invalid scenario config")?)
}

fn default_name(experiment: &str, subject: &str, ext: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    PathBuf::from(format!("{experiment}_{subject}_{stamp}.{ext}"))
}

enum Link {
    Local(LocalLink),
    Remote(RemoteLink),
}

impl Link {
    fn open(run: &RunArgs, seed: u64) -> Result<Self> {
        let offsets: BTreeMap<String, f64> = match &run.offsets {
            Some(p) => serde_json::from_value(read_json(p)?).context("offsets must map source ids to seconds")?,
            None => BTreeMap::new(),
        };
        Ok(match &run.hub {
            Some(addr) => Link::Remote(RemoteLink::connect(addr.as_str(), offsets)?),
            None => Link::Local(LocalLink::new(LocalLinkConfig { offsets, seed, ..Default::default() })?),
        })
    }

    fn as_dyn(&mut self) -> &mut dyn ExperimentLink {
        match self {
            Link::Local(l) => l,
            Link::Remote(r) => r,
        }
    }

    /// Local runs write the recording; remote runs write the metadata the
    /// wire protocol cannot carry.
    fn save(self, run: &RunArgs, experiment_id: &str) -> Result<PathBuf> {
        match self {
            Link::Local(mut l) => {
                let bytes = l.finish_bytes()?.ok_or_else(|| anyhow!("run already finalized"))?;
                let path = run.out.clone().unwrap_or_else(|| default_name(experiment_id, &run.subject, "srec"));
                fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
                Ok(path)
            }
            Link::Remote(mut r) => {
                r.finish()?;
                let path = run.out.clone().unwrap_or_else(|| default_name(experiment_id, &run.subject, "json"));
                let f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                serde_json::to_writer_pretty(f, r.metadata())?;
                Ok(path)
            }
        }
    }
}

fn case1(a: Case1Args) -> Result<()> {
    let cfg: CaseOneConfig = scenario(&a.run, &[("task_id", Value::from(a.task.id()))])?;
    cfg.validate()?;
    let mut link = Link::open(&a.run, cfg.seed)?;
    let report = run_case1(&cfg, link.as_dyn(), None)?;
    let path = link.save(&a.run, &cfg.experiment_id)?;
    println!(
        "task {} ({:?} acceleration, {:?} trajectory): {:.1} s, {} markers, {} polls, peak joint speed {:.1} deg/s",
        a.task.id(),
        report.acceleration,
        report.trajectory,
        report.duration,
        report.markers.len(),
        report.polls.len(),
        report.max_speed_deg()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn case2(a: Case2Args) -> Result<()> {
    let cfg: CaseTwoConfig = scenario(&a.run, &[])?;
    cfg.validate()?;
    let mut link = Link::open(&a.run, cfg.seed)?;
    let report = run_case2(&cfg, link.as_dyn())?;
    let changes = report.labels().iter().filter(|l| **l == "Robot state change").count();
    let path = link.save(&a.run, &cfg.experiment_id)?;
    println!(
        "{} transfers in {:.1} s (baseline {:.1} s), {changes} robot state changes, min separation {:.3} m",
        report.place_events.len(),
        report.duration,
        report.baseline_duration,
        report.min_distance()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn epoch(a: EpochArgs) -> Result<()> {
    let rec = read_recording_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if rec.truncated {
        warn!("{} is truncated; using the recovered prefix", a.input.display());
    }
    let corrected = correct_recording(&rec)?;
    let pattern = glob::Pattern::new(&a.marker).with_context(|| format!("bad marker pattern {:?}", a.marker))?;
    let epochs = extract_epochs_matching(&corrected, |l| l == a.marker || pattern.matches(l), &a.marker, a.pre, a.post)?;
    let f = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    export_epochs(&epochs, f)?;
    println!("{} epochs written to {}", epochs.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let rec = read_recording_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    print!("{}", crate::inspect::render(&rec)?);
    Ok(())
}

fn inject(a: InjectArgs) -> Result<()> {
    if a.label.is_empty() {
        bail!("marker label must not be empty");
    }
    let clock = Arc::new(ShiftedClock::new(Instant::now(), 0.0));
    let client = ProducerClient::connect_as(&a.hub, "investigator", SessionRole::Monitor, clock.clone())
        .with_context(|| format!("connecting to {}", a.hub))?;
    // the hub probes every session right after HELLO; wait for it so the
    // marker time can be mapped
    client.wait_for_pings(1, Duration::from_secs(5))?;
    client.marker(&MarkerSample::new(clock.now(), &a.label, MarkerOrigin::Investigator))?;
    client.bye()?;
    Ok(())
}
