//! prep, pack, inspect and gcmvn.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use s2t_core::audio::{MAX_SPEED, MIN_SPEED};
use s2t_core::dataset::{FsStore, Locator, ZipWriter};
use s2t_core::{
    decode_audio, logmel_fbank, parse_pipeline, read_data_config, read_manifest, resolve_audio, speed_perturb,
    write_data_config, write_manifest, AudioFormat, DataConfig, Exec, FbankConfig, FeatureMatrix, GcmvnStats,
    ManifestRow, TransformRegistry,
};

use crate::{usage_error, CmdResult, ExitContext, Failure, GcmvnArgs, InspectArgs, PackArgs, PrepArgs};

const FEATURE_ARCHIVE: &str = "features.zip";

/// A manifest with its data config and the directory locators resolve in.
pub struct Dataset {
    pub rows: Vec<ManifestRow>,
    pub config: DataConfig,
    pub root: PathBuf,
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Reads the manifest and its config (explicit, or `config.yaml` beside the
/// manifest). Locators resolve against the config's `audio_root`, taken
/// relative to the config file, or else the manifest directory.
pub fn load_dataset(manifest: &Path, config: Option<&Path>) -> Result<Dataset, Failure> {
    let bytes = fs::read(manifest).with_context(|| format!("reading {}", manifest.display())).usage()?;
    let rows = read_manifest(&bytes).with_context(|| format!("parsing {}", manifest.display())).usage()?;
    let manifest_dir = parent_dir(manifest);
    let config_path = match config {
        Some(p) => Some(p.to_path_buf()),
        None => Some(manifest_dir.join("config.yaml")).filter(|p| p.is_file()),
    };
    let (config, root) = match config_path {
        Some(path) => {
            let text = fs::read(&path).with_context(|| format!("reading {}", path.display())).usage()?;
            let (cfg, warnings) =
                read_data_config(&text).with_context(|| format!("parsing {}", path.display())).usage()?;
            for w in warnings {
                eprintln!("warning: {}: {w}", path.display());
            }
            let root = match &cfg.audio_root {
                Some(r) => parent_dir(&path).join(r),
                None => manifest_dir.clone(),
            };
            (cfg, root)
        }
        None => (DataConfig::default(), manifest_dir),
    };
    Ok(Dataset { rows, config, root })
}

fn fbank_for(cfg: &DataConfig) -> FbankConfig {
    FbankConfig { num_mel_bins: cfg.input_feat_per_channel, ..FbankConfig::default() }
}

/// Features behind a locator: a stored matrix, or audio run through fbank.
pub fn load_features(row: &ManifestRow, ds: &Dataset, store: &FsStore) -> anyhow::Result<FeatureMatrix> {
    let bytes = resolve_audio(&row.audio, store).with_context(|| format!("resolving `{}`", row.audio))?;
    if FeatureMatrix::is_matrix_file(&bytes) {
        return Ok(FeatureMatrix::from_bytes(&bytes)?);
    }
    let wave = decode_audio(&bytes, None)?;
    if wave.sample_rate != ds.config.sample_rate {
        bail!("audio at {} Hz, config expects {} Hz", wave.sample_rate, ds.config.sample_rate);
    }
    Ok(logmel_fbank(&wave, &fbank_for(&ds.config))?)
}

// ---------------------------------------------------------------------------
// prep

struct TranscriptRow {
    id: String,
    audio: Option<String>,
    tgt_text: String,
    src_text: Option<String>,
    speaker: Option<String>,
}

fn read_transcripts(path: &Path) -> anyhow::Result<Vec<TranscriptRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("empty transcript file"))?.split('\t').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(id_col), Some(tgt_col)) = (col("id"), col("tgt_text")) else {
        bail!("transcript header needs `id` and `tgt_text` columns");
    };
    let (audio_col, src_col, spk_col) = (col("audio"), col("src_text"), col("speaker"));
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            bail!("transcript line {}: expected {} columns, found {}", i + 2, header.len(), f.len());
        }
        let opt = |c: Option<usize>| c.map(|c| f[c]).filter(|s| !s.is_empty()).map(str::to_string);
        let id = f[id_col].to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            bail!("transcript line {}: empty or duplicate id `{id}`", i + 2);
        }
        rows.push(TranscriptRow {
            id,
            audio: opt(audio_col),
            tgt_text: f[tgt_col].to_string(),
            src_text: opt(src_col),
            speaker: opt(spk_col),
        });
    }
    Ok(rows)
}

fn speed_suffix(factor: f64) -> String {
    format!("-sp{factor}")
}

fn prep_fbank_config(args: &PrepArgs) -> Result<FbankConfig, Failure> {
    let mut cfg = match &args.fbank_config {
        Some(p) => {
            let text = fs::read(p).with_context(|| format!("reading {}", p.display())).usage()?;
            serde_yaml::from_slice(&text).with_context(|| format!("parsing {}", p.display())).usage()?
        }
        None => FbankConfig::default(),
    };
    if let Some(n) = args.num_mel_bins {
        cfg.num_mel_bins = n;
    }
    if let Some(d) = args.dither {
        cfg.dither = d;
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn check_speeds(speeds: &[f64]) -> Result<(), Failure> {
    let mut seen = Vec::new();
    for &s in speeds {
        if !(MIN_SPEED..=MAX_SPEED).contains(&s) {
            return Err(usage_error(format!("speed {s} outside [{MIN_SPEED}, {MAX_SPEED}]")));
        }
        if seen.contains(&s) {
            return Err(usage_error(format!("speed {s} given twice")));
        }
        seen.push(s);
    }
    Ok(())
}

fn is_safe_file_stem(id: &str) -> bool {
    !id.starts_with('.') && !id.contains(['/', '\\', '\0'])
}

fn find_audio(dir: &Path, row: &TranscriptRow) -> anyhow::Result<PathBuf> {
    if let Some(a) = &row.audio {
        return Ok(dir.join(a));
    }
    ["wav", "flac"]
        .iter()
        .map(|ext| dir.join(format!("{}.{ext}", row.id)))
        .find(|p| p.is_file())
        .ok_or_else(|| anyhow!("no {0}.wav or {0}.flac in {1}", row.id, dir.display()))
}

type Extracted = Vec<(ManifestRow, FeatureMatrix)>;

fn extract_row(
    args: &PrepArgs,
    fbank: &FbankConfig,
    index: usize,
    row: &TranscriptRow,
) -> anyhow::Result<(u32, Extracted)> {
    if !is_safe_file_stem(&row.id) {
        bail!("id `{}` cannot be used as a file name", row.id);
    }
    let path = find_audio(&args.audio_dir, row)?;
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let wave = decode_audio(&bytes, None).with_context(|| format!("decoding {}", path.display()))?;
    let items = args
        .speed
        .iter()
        .enumerate()
        .map(|(k, &factor)| {
            let w = if factor == 1.0 { wave.clone() } else { speed_perturb(&wave, factor)? };
            let cfg = FbankConfig {
                dither_seed: args.seed.wrapping_add((index * args.speed.len() + k) as u64),
                ..fbank.clone()
            };
            let feat = logmel_fbank(&w, &cfg)?;
            if feat.num_frames() == 0 {
                bail!("no complete frame in {}", path.display());
            }
            let id = if factor == 1.0 { row.id.clone() } else { format!("{}{}", row.id, speed_suffix(factor)) };
            let mut m = ManifestRow::new(id, String::new(), feat.num_frames() as u64, row.tgt_text.clone());
            m.src_text = row.src_text.clone();
            m.speaker = row.speaker.clone();
            Ok((m, feat))
        })
        .collect::<anyhow::Result<Extracted>>()?;
    Ok((wave.sample_rate, items))
}

pub fn prep(args: &PrepArgs, exec: Exec) -> CmdResult {
    let fbank = prep_fbank_config(args)?;
    check_speeds(&args.speed)?;
    let transcripts = read_transcripts(&args.transcripts).usage()?;
    if transcripts.is_empty() {
        return Err(usage_error("transcript file has no rows"));
    }
    if !args.audio_dir.is_dir() {
        return Err(usage_error(format!("{} is not a directory", args.audio_dir.display())));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let indexed: Vec<(usize, &TranscriptRow)> = transcripts.iter().enumerate().collect();
    let results = exec.map(&indexed, |(i, row)| extract_row(args, &fbank, *i, row));

    let mut failures = Vec::new();
    let mut kept: Extracted = Vec::new();
    let mut dropped = 0usize;
    let mut rates = Vec::new();
    for (row, result) in transcripts.iter().zip(results) {
        match result {
            Ok((rate, items)) => {
                if !rates.contains(&rate) {
                    rates.push(rate);
                }
                for (m, feat) in items {
                    if m.n_frames > args.max_frames {
                        dropped += 1;
                    } else {
                        kept.push((m, feat));
                    }
                }
            }
            Err(e) => {
                eprintln!("warning: {}: {e:#}", row.id);
                failures.push((row.id.clone(), format!("{e:#}")));
            }
        }
    }

    let mut report = String::from("id\terror\n");
    for (id, e) in &failures {
        report.push_str(&format!("{id}\t{}\n", e.replace(['\t', '\n'], " ")));
    }
    fs::write(args.out.join("failures.tsv"), report)?;
    if failures.len() == transcripts.len() {
        return Err(anyhow!("all {} inputs failed; see failures.tsv", failures.len()).into());
    }

    let mut rows = Vec::with_capacity(kept.len());
    if args.pack {
        let file = fs::File::create(args.out.join(FEATURE_ARCHIVE))?;
        let mut zip = ZipWriter::new(BufWriter::new(file));
        for (m, feat) in &kept {
            let entry = zip.add(&format!("{}.fmat", m.id), &feat.to_bytes())?;
            let loc = Locator::Range { path: FEATURE_ARCHIVE.into(), offset: entry.offset, length: entry.length };
            rows.push(ManifestRow { audio: loc.to_string(), ..m.clone() });
        }
        zip.finish()?.0.flush()?;
    } else {
        let dir = args.out.join("feats");
        fs::create_dir_all(&dir)?;
        for (m, feat) in &kept {
            let name = format!("{}.fmat", m.id);
            fs::write(dir.join(&name), feat.to_bytes())?;
            rows.push(ManifestRow { audio: format!("feats/{name}"), ..m.clone() });
        }
    }
    fs::write(args.out.join("manifest.tsv"), write_manifest(&rows)?)?;
    if rates.len() > 1 {
        eprintln!("warning: inputs mix sample rates {rates:?}; config.yaml records {}", rates[0]);
    }

    let mut config = DataConfig {
        audio_root: Some(".".into()),
        input_feat_per_channel: fbank.num_mel_bins,
        sample_rate: rates.first().copied().unwrap_or(16000),
        ..DataConfig::default()
    };
    config.transforms = default_transforms();
    if args.gcmvn {
        config.gcmvn = Some(accumulate(kept.iter().map(|(_, f)| f), fbank.num_mel_bins)?.finalize()?);
    }
    fs::write(args.out.join("config.yaml"), write_data_config(&config)?)?;

    eprintln!(
        "prep: {} rows written, {} inputs failed, {} rows over {} frames dropped",
        rows.len(),
        failures.len(),
        dropped,
        args.max_frames
    );
    Ok(())
}

fn default_transforms() -> Vec<(String, Vec<s2t_core::transforms::TransformSpec>)> {
    use s2t_core::transforms::TransformSpec;
    let lb = serde_yaml::from_str("{preset: lb}").expect("static yaml");
    vec![
        ("_train".into(), vec![TransformSpec::named("utterance_cmvn"), TransformSpec::with_params("specaugment", lb)]),
        ("*".into(), vec![TransformSpec::named("utterance_cmvn")]),
    ]
}

fn accumulate<'a>(feats: impl Iterator<Item = &'a FeatureMatrix>, dim: usize) -> anyhow::Result<GcmvnStats> {
    let mut stats = GcmvnStats::new(dim);
    for f in feats {
        stats.accumulate(f)?;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// pack

fn entry_extension(bytes: &[u8]) -> &'static str {
    if FeatureMatrix::is_matrix_file(bytes) {
        return "fmat";
    }
    match AudioFormat::sniff(bytes) {
        Some(AudioFormat::Wav) => "wav",
        Some(AudioFormat::Flac) => "flac",
        None => "bin",
    }
}

pub fn pack(args: &PackArgs) -> CmdResult {
    let ds = load_dataset(&args.manifest, args.config.as_deref())?;
    fs::create_dir_all(&args.out)?;
    let target = args.out.join(FEATURE_ARCHIVE);
    for row in &ds.rows {
        if let Ok(Locator::Range { path, .. }) = row.audio.parse::<Locator>() {
            let source = ds.root.join(&path);
            if target.canonicalize().ok().is_some_and(|t| Some(t) == source.canonicalize().ok()) {
                return Err(usage_error(format!("{} is both input and output", target.display())));
            }
        }
    }
    let store = FsStore::new(&ds.root);
    let mut payloads = Vec::with_capacity(ds.rows.len());
    for row in &ds.rows {
        let bytes = resolve_audio(&row.audio, &store).with_context(|| format!("row `{}`", row.id))?;
        payloads.push(bytes);
    }
    let mut zip = ZipWriter::new(BufWriter::new(fs::File::create(&target)?));
    let mut rows = Vec::with_capacity(ds.rows.len());
    for (row, bytes) in ds.rows.iter().zip(&payloads) {
        let entry = zip.add(&format!("{}.{}", row.id, entry_extension(bytes)), bytes)?;
        let loc = Locator::Range { path: FEATURE_ARCHIVE.into(), offset: entry.offset, length: entry.length };
        rows.push(ManifestRow { audio: loc.to_string(), ..row.clone() });
    }
    let (mut sink, _) = zip.finish()?;
    sink.flush()?;
    fs::write(args.out.join("manifest.tsv"), write_manifest(&rows)?)?;
    let config = DataConfig { audio_root: Some(".".into()), ..ds.config.clone() };
    fs::write(args.out.join("config.yaml"), write_data_config(&config)?)?;
    eprintln!("pack: {} entries into {}", rows.len(), target.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let ds = load_dataset(&args.manifest, args.config.as_deref())?;
    let row =
        ds.rows.iter().find(|r| r.id == args.id).ok_or_else(|| usage_error(format!("unknown id `{}`", args.id)))?;
    let store = FsStore::new(&ds.root);
    let feat = load_features(row, &ds, &store)?;
    let pipeline = parse_pipeline(&ds.config, &args.split, &TransformRegistry::default()).usage()?;
    let out = pipeline.apply_seeded(feat.clone(), 0)?;
    let (_, std) = out.column_moments();
    let cells = out.as_slice();
    let mean = cells.iter().map(|&v| v as f64).sum::<f64>() / cells.len().max(1) as f64;
    let mean_std = std.iter().sum::<f64>() / std.len().max(1) as f64;

    let mut s = String::new();
    s += &format!("id={}\naudio={}\nn_frames={}\ntgt_text={}\n", row.id, row.audio, row.n_frames, row.tgt_text);
    if let Some(t) = &row.src_text {
        s += &format!("src_text={t}\n");
    }
    if let Some(t) = &row.speaker {
        s += &format!("speaker={t}\n");
    }
    let stages = pipeline.stage_names();
    s += &format!(
        "feature_frames={}\nfeature_dim={}\nsplit={}\npipeline={}\nfeat_mean={mean:.6}\nfeat_std={mean_std:.6}\n",
        feat.num_frames(),
        feat.feature_dim(),
        args.split,
        if stages.is_empty() { "none".to_string() } else { stages.join(",") },
    );
    print!("{s}");
    if feat.num_frames() as u64 != row.n_frames {
        eprintln!("warning: manifest says {} frames, features have {}", row.n_frames, feat.num_frames());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gcmvn

pub fn gcmvn(args: &GcmvnArgs, exec: Exec) -> CmdResult {
    let ds = load_dataset(&args.manifest, args.config.as_deref())?;
    if ds.rows.is_empty() {
        return Err(usage_error("manifest has no rows"));
    }
    let store = FsStore::new(&ds.root);
    let dim = ds.config.input_feat_per_channel;
    let partials = exec.map(&ds.rows, |row| -> anyhow::Result<GcmvnStats> {
        let feat = load_features(row, &ds, &store).with_context(|| format!("row `{}`", row.id))?;
        let mut s = GcmvnStats::new(dim);
        s.accumulate(&feat)?;
        Ok(s)
    });
    let mut total = GcmvnStats::new(dim);
    for p in partials {
        total = total.merge(&p?)?;
    }
    let g = total.finalize()?;
    let yaml = serde_yaml::to_string(&g).context("serializing statistics")?;
    fs::write(&args.out, yaml).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("gcmvn: {} utterances, {} frames", ds.rows.len(), total.count);
    Ok(())
}
