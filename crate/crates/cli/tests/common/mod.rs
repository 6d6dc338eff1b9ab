#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use s2t_core::{encode_wav, Waveform};

pub fn s2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2t")).args(args).output().expect("spawn s2t")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of `key` in flat `key=value` output.
pub fn field(text: &str, key: &str) -> Option<String> {
    text.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
}

/// Samples needed for exactly `frames` 25/10 ms frames at 16 kHz.
pub fn samples_for_frames(frames: usize) -> usize {
    (frames - 1) * 160 + 400
}

/// A 16 kHz tone of `n` samples; `seed` varies the pitch.
pub fn tone(n: usize, seed: usize) -> Waveform {
    let f = 200.0 + 37.0 * seed as f64;
    let samples = (0..n).map(|i| (0.3 * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()) as f32).collect();
    Waveform::new(samples, 16000)
}

pub fn write_wav(path: &Path, w: &Waveform) {
    fs::write(path, encode_wav(w)).unwrap();
}

/// Writes `<dir>/audio/<id>.wav` for each `(id, samples, text)` and a
/// transcript TSV at `<dir>/transcripts.tsv`.
pub fn corpus(dir: &Path, utts: &[(&str, usize, &str)]) {
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).unwrap();
    let mut tsv = String::from("id\ttgt_text\n");
    for (i, (id, n, text)) in utts.iter().enumerate() {
        write_wav(&audio.join(format!("{id}.wav")), &tone(*n, i));
        tsv.push_str(&format!("{id}\t{text}\n"));
    }
    fs::write(dir.join("transcripts.tsv"), tsv).unwrap();
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}
