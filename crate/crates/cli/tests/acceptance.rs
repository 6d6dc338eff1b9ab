//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Oracles are independent of the library code paths they check.

mod common;
#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fs;
use std::io::{BufReader, Read};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{corpus, field, path, s2t, samples_for_frames, stdout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2t_core::dataset::MemStore;
use s2t_core::scorers::{align, Smoothing};
use s2t_core::simul::{serve_agent, ExternalAgent, ReplayAgent, SimulSource};
use s2t_core::transforms::{specaugment_with_masks, MaskAxis};
use s2t_core::{
    average_lagging, bleu, chrf, differentiable_average_lagging, logmel_fbank, pack_zip, resolve_audio, run_session,
    specaugment, synth_sine, utterance_cmvn, waitk_agent, wer, BleuOptions, DelaySequence, FbankConfig, FeatureMatrix,
    LatencyRegime, SpecAugmentConfig,
};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn feature_shape() -> Check {
    let w = synth_sine(440.0, 1.0, 16000, 0.5).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let f = logmel_fbank(&w, &FbankConfig::default()).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure!((f.num_frames(), f.feature_dim()) == (98, 80), "shape {}x{}", f.num_frames(), f.feature_dim());
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(())
}

fn cmvn() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for i in 0..100 {
        let (t, d) = (rng.random_range(2..300), rng.random_range(1..100));
        let scale = rng.random_range(0.1..50.0f32);
        let m = FeatureMatrix::new(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0f32) * scale + 3.0).collect())
            .unwrap();
        let (mean, std) = utterance_cmvn(&m).column_moments();
        for b in 0..d {
            ensure!(mean[b].abs() <= 1e-5, "matrix {i} bin {b}: mean {}", mean[b]);
            ensure!((std[b] - 1.0).abs() <= 1e-4, "matrix {i} bin {b}: std {}", std[b]);
        }
    }
    Ok(())
}

fn frame_filter() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let sizes = [2999, 3000, 3001, 4000, 120];
    let utts: Vec<(String, usize)> = sizes.iter().map(|&n| (format!("f{n}"), samples_for_frames(n))).collect();
    let spec: Vec<(&str, usize, &str)> = utts.iter().map(|(id, n)| (id.as_str(), *n, "x")).collect();
    corpus(dir.path(), &spec);
    let out = dir.path().join("out");
    let o = s2t(&[
        "prep",
        "--audio-dir",
        path(&dir.path().join("audio")),
        "--transcripts",
        path(&dir.path().join("transcripts.tsv")),
        "--out",
        path(&out),
    ]);
    ensure!(o.status.success(), "prep exited {:?}", o.status.code());
    let rows = s2t_core::read_manifest(&fs::read(out.join("manifest.tsv")).unwrap()).map_err(|e| e.to_string())?;
    let kept: Vec<(&str, u64)> = rows.iter().map(|r| (r.id.as_str(), r.n_frames)).collect();
    ensure!(kept == [("f2999", 2999), ("f3000", 3000), ("f120", 120)], "kept {kept:?}");
    Ok(())
}

fn wer_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tokens = |lo: usize| -> Vec<&'static str> {
        let n = rng.random_range(lo..=6);
        (0..n).map(|_| ["a", "b", "c"][rng.random_range(0..3)]).collect()
    };
    for i in 0..1000 {
        let (r, h) = (tokens(1), tokens(0));
        let (best, minimal) = oracles::brute_force_edits(&r, &h);
        let c = align(&r, &h);
        ensure!(c.edits() == best, "pair {i}: {} edits, oracle {best}", c.edits());
        ensure!(minimal.contains(&(c.substitutions, c.insertions, c.deletions)), "pair {i}: non-minimal split");
        let rep = wer(&[r.join(" ")], &[h.join(" ")]).map_err(|e| e.to_string())?;
        ensure!(rep.wer == best as f64 / r.len() as f64, "pair {i}: wer {}", rep.wer);
    }
    ensure!(start.elapsed() < Duration::from_secs(10), "took {:?}", start.elapsed());
    Ok(())
}

fn random_corpus(seed: u64, n: usize) -> (Vec<String>, Vec<String>) {
    let vocab = ["the", "a", "cat", "dog", "sat", "ran", "on", "mat", "big", "red", "."];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..n {
        let r: Vec<&str> = (0..rng.random_range(3..15)).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
        let mut h = r.clone();
        for t in h.iter_mut() {
            if rng.random_bool(0.2) {
                *t = vocab[rng.random_range(0..vocab.len())];
            }
        }
        if rng.random_bool(0.3) {
            h.pop();
        }
        refs.push(r.join(" "));
        hyps.push(h.join(" "));
    }
    (refs, hyps)
}

fn bleu_checks() -> Check {
    let (refs, hyps) = random_corpus(5, 50);
    let same = bleu(&refs, &refs, BleuOptions::default()).map_err(|e| e.to_string())?;
    ensure!(same.bleu == 100.0, "identity bleu {}", same.bleu);
    ensure!(format!("{:.3}", same.bleu) == "100.000", "formatted {:.3}", same.bleu);

    let plain = BleuOptions { smoothing: Smoothing::None, ..Default::default() };
    let r = bleu(&["the cat sat on the mat"], &["the cat on the mat"], plain).map_err(|e| e.to_string())?;
    ensure!(r.precisions == [1.0, 3.0 / 4.0, 1.0 / 3.0, 0.0], "precisions {:?}", r.precisions);

    for smooth in [false, true] {
        let opts = BleuOptions { smoothing: if smooth { Smoothing::ExpFloor } else { Smoothing::None }, ..plain };
        let ours = bleu(&refs, &hyps, opts).map_err(|e| e.to_string())?.bleu;
        let (theirs, _, _) = oracles::reference_bleu(&refs, &hyps, smooth);
        ensure!((ours - theirs).abs() <= 1e-6, "smooth={smooth}: {ours} vs {theirs}");
    }
    Ok(())
}

fn chrf_checks() -> Check {
    let (refs, _) = random_corpus(6, 10);
    let id = chrf(&refs, &refs).map_err(|e| e.to_string())?;
    ensure!((id - 100.0).abs() < 1e-12, "identity chrF {id}");
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let alphabet: Vec<char> = "abcd efg".chars().collect();
    for i in 0..200 {
        let mut text = |lo: usize| -> String {
            (0..rng.random_range(lo..25)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let (r, h) = (text(1), text(0));
        let ours = chrf(std::slice::from_ref(&r), std::slice::from_ref(&h)).map_err(|e| e.to_string())?;
        let theirs = oracles::reference_chrf(&[r], &[h], 6, 2.0);
        ensure!((ours - theirs).abs() <= 1e-6, "pair {i}: {ours} vs {theirs}");
    }
    Ok(())
}

fn waitk_delays(k: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|i| (k + i - 1).min(n)).collect()
}

fn al_closed_form() -> Check {
    for n in 5..=50 {
        for k in 1..=n {
            let d = DelaySequence::from_counts(&waitk_delays(k, n), n).map_err(|e| e.to_string())?;
            ensure!(average_lagging(&d) == k as f64, "n={n} k={k}: AL {}", average_lagging(&d));
        }
        let offline = DelaySequence::from_counts(&vec![n; n], n).map_err(|e| e.to_string())?;
        ensure!(average_lagging(&offline) == n as f64, "offline n={n}");
    }
    Ok(())
}

fn dal_closed_form() -> Check {
    for n in 5..=50 {
        let offline = DelaySequence::from_counts(&vec![n; n], n).map_err(|e| e.to_string())?;
        let dal = differentiable_average_lagging(&offline);
        ensure!(dal == n as f64, "offline n={n}: DAL {dal}");
        for k in 1..=n {
            let d = DelaySequence::from_counts(&waitk_delays(k, n), n).map_err(|e| e.to_string())?;
            let dal = differentiable_average_lagging(&d);
            ensure!(dal == k as f64, "n={n} k={k}: DAL {dal}");
        }
    }
    Ok(())
}

fn regimes() -> Check {
    for (al, want) in [(6.8, "high"), (5.4, "medium"), (2.9, "low")] {
        let got = LatencyRegime::from_al(al).as_str();
        ensure!(got == want, "AL {al}: {got}");
    }
    Ok(())
}

fn zip_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let blobs: Vec<(String, Vec<u8>)> = (0..100)
        .map(|i| (format!("blob{i:03}.bin"), (0..rng.random_range(0..4096)).map(|_| rng.random()).collect()))
        .collect();
    let (archive, index) = pack_zip(&blobs).map_err(|e| e.to_string())?;
    let mut store = MemStore::default();
    store.insert("f.zip", archive.clone());
    for (name, data) in &blobs {
        let loc = index.locator("f.zip", name).ok_or(format!("{name} not indexed"))?;
        let got = resolve_audio(&loc, &store).map_err(|e| e.to_string())?;
        ensure!(&got == data, "{name}: resolved bytes differ");
    }
    let mut z = zip::ZipArchive::new(std::io::Cursor::new(archive)).map_err(|e| e.to_string())?;
    ensure!(z.len() == 100, "unzip sees {} entries", z.len());
    for (name, data) in &blobs {
        let mut got = Vec::new();
        z.by_name(name).map_err(|e| e.to_string())?.read_to_end(&mut got).map_err(|e| e.to_string())?;
        ensure!(&got == data, "{name}: unzip bytes differ");
    }
    Ok(())
}

fn specaugment_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = FeatureMatrix::new(120, 40, (0..4800).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    ensure!(specaugment(&m, &SpecAugmentConfig::identity(), &mut rng) == m, "zero-mask config changed input");

    let cfg = SpecAugmentConfig::ld();
    let ones = FeatureMatrix::filled(500, 80, 1.0);
    let mut masked = 0usize;
    for draw in 0..1000 {
        let (out, masks) = specaugment_with_masks(&ones, &cfg, &mut rng);
        ensure!((out.num_frames(), out.feature_dim()) == (500, 80), "draw {draw}: shape changed");
        let nf = masks.iter().filter(|k| k.axis == MaskAxis::Freq).count();
        ensure!(nf == 2 && masks.len() == 4, "draw {draw}: {} masks", masks.len());
        for k in &masks {
            let (limit, dim) = if k.axis == MaskAxis::Freq { (27, 80) } else { (100, 500) };
            ensure!(k.width <= limit && k.start + k.width <= dim, "draw {draw}: {k:?}");
        }
        // Cells outside the masks are untouched, so nothing was warped.
        ensure!(out.as_slice().iter().all(|&v| v == 0.0 || v == 1.0), "draw {draw}: non-mask value");
        masked += out.as_slice().iter().filter(|&&v| v == 0.0).count();
    }
    let observed = masked as f64 / (1000.0 * 500.0 * 80.0);
    let expected = oracles::expected_masked_fraction(500, 80, 27, 2, 100, 2, 1.0);
    ensure!((observed / expected - 1.0).abs() <= 0.2, "masked {observed:.4}, expected {expected:.4}");
    Ok(())
}

fn external_protocol() -> Check {
    let sources = ["we will meet at the station at noon", "a b c", "x", "one two three four five six seven"];
    let scripts = ["nous nous verrons a la gare a midi", "p q r s", "y", "un deux trois"];
    let (harness_read, agent_write) = std::io::pipe().map_err(|e| e.to_string())?;
    let (agent_read, harness_write) = std::io::pipe().map_err(|e| e.to_string())?;

    let mut local = Vec::new();
    for (i, (s, t)) in sources.iter().zip(scripts).enumerate() {
        let src = SimulSource::words(format!("s{i}"), s);
        let toks = t.split(' ').map(str::to_string).collect();
        local.push(run_session(&mut waitk_agent(2, toks), &src, 1000).map_err(|e| e.to_string())?);
    }
    let mut replay = ReplayAgent::from_traces(&local);
    let server = std::thread::spawn(move || serve_agent(&mut replay, BufReader::new(agent_read), agent_write));
    let mut peer = ExternalAgent::new(BufReader::new(harness_read), harness_write);
    for (i, s) in sources.iter().enumerate() {
        let src = SimulSource::words(format!("s{i}"), s);
        let remote = run_session(&mut peer, &src, 1000).map_err(|e| e.to_string())?;
        let mine = &local[i];
        ensure!(&remote == mine, "s{i}: traces differ");
        let (a, b) = (remote.average_lagging(), mine.average_lagging());
        ensure!(a == b, "s{i}: AL {a:?} vs {b:?}");
        let (a, b) = (remote.differentiable_average_lagging(), mine.differentiable_average_lagging());
        ensure!(a == b, "s{i}: DAL {a:?} vs {b:?}");
    }
    drop(peer);
    let served = server.join().map_err(|_| "agent thread panicked")?.map_err(|e| e.to_string())?;
    ensure!(served == sources.len(), "served {served} sessions");
    Ok(())
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let texts: Vec<String> = (0..10).map(|i| format!("utterance number {i} says hello to the world")).collect();
    let ids: Vec<String> = (0..10).map(|i| format!("utt{i:02}")).collect();
    let spec: Vec<(&str, usize, &str)> =
        ids.iter().zip(&texts).enumerate().map(|(i, (id, t))| (id.as_str(), 16000 + 1600 * i, t.as_str())).collect();
    corpus(dir.path(), &spec);
    let (prep_dir, pack_dir) = (dir.path().join("prep"), dir.path().join("packed"));
    let run = |args: &[&str]| -> Result<String, String> {
        let mut full = vec!["--workers", "1"];
        full.extend_from_slice(args);
        let o = s2t(&full);
        if !o.status.success() {
            return Err(format!("{args:?} exited {:?}: {}", o.status.code(), common::stderr(&o)));
        }
        Ok(stdout(&o))
    };
    run(&[
        "prep",
        "--audio-dir",
        path(&dir.path().join("audio")),
        "--transcripts",
        path(&dir.path().join("transcripts.tsv")),
        "--out",
        path(&prep_dir),
    ])?;
    run(&["pack", "--manifest", path(&prep_dir.join("manifest.tsv")), "--out", path(&pack_dir)])?;
    let manifest = pack_dir.join("manifest.tsv");
    let traces = dir.path().join("traces.jsonl");
    let report = run(&["simul", "--manifest", path(&manifest), "--agent", "waitk:3", "--traces", path(&traces)])?;
    ensure!(field(&report, "al").as_deref() == Some("3.000"), "simul report:\n{report}");

    let mut hyps = String::new();
    for line in fs::read_to_string(&traces).unwrap().lines() {
        let t: s2t_core::SimulTrace = serde_json::from_str(line).map_err(|e| e.to_string())?;
        hyps.push_str(&t.hypothesis_text());
        hyps.push('\n');
    }
    fs::write(dir.path().join("hyps.txt"), hyps).unwrap();
    fs::write(dir.path().join("refs.txt"), texts.join("\n") + "\n").unwrap();
    let scored = run(&[
        "score",
        "--refs",
        path(&dir.path().join("refs.txt")),
        "--hyps",
        path(&dir.path().join("hyps.txt")),
        "--bleu",
    ])?;
    ensure!(field(&scored, "bleu").as_deref() == Some("100.000"), "score report:\n{scored}");
    ensure!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("feature shape 98x80", feature_shape),
        ("utterance CMVN on 100 matrices", cmvn),
        ("prep frame filter at 3000", frame_filter),
        ("WER equals exhaustive search", wer_oracle),
        ("BLEU identity, hand count, reference", bleu_checks),
        ("chrF identity and brute force", chrf_checks),
        ("AL closed form", al_closed_form),
        ("DAL closed form", dal_closed_form),
        ("latency regime labels", regimes),
        ("ZIP round trip and unzip", zip_round_trip),
        ("SpecAugment bounds and masked fraction", specaugment_checks),
        ("external agent protocol", external_protocol),
        ("end-to-end smoke", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let ms = start.elapsed().as_millis();
        match result {
            Ok(()) => println!("PASS {:>2} {name} ({ms} ms)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({ms} ms): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
