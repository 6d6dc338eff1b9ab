//! Non-neural core of a speech-to-text workflow.
//!
//! The crate covers the data side (audio decoding, Kaldi-style log mel
//! filterbanks, CMVN, SpecAugment, TSV manifests, YAML data configs, stored
//! ZIP archives with byte-range locators) and the evaluation side (WER, BLEU,
//! chrF, AL/DAL latency and a simultaneous-translation session harness).
//!
//! Batch entry points take an [`Exec`] so the same code runs sequentially or
//! on the rayon pool. Building without the default `parallel` feature drops
//! rayon entirely and every [`Exec`] runs sequentially.

pub mod audio;
pub mod dataset;
pub mod features;
pub mod parallel;
pub mod scorers;
pub mod simul;
pub mod transforms;

pub use audio::{decode_audio, encode_wav, speed_perturb, synth_sine, AudioError, AudioFormat, Waveform};
pub use dataset::{
    bucket_batches, filter_by_frames, pack_zip, read_data_config, read_manifest, resolve_audio, write_data_config,
    write_manifest, DataConfig, DatasetError, ManifestRow, ZipIndex,
};
pub use features::{
    frame_count, logmel_fbank, utterance_cmvn, FbankConfig, FeatureError, FeatureMatrix, GcmvnStats, WindowType,
};
pub use parallel::Exec;
pub use scorers::{
    average_lagging, bleu, chrf, differentiable_average_lagging, wer, BleuOptions, BleuReport, DelaySequence,
    ScoreError, ScoreReport, WerReport,
};
pub use simul::{run_session, waitk_agent, Action, Agent, LatencyRegime, SimulError, SimulTrace};
pub use transforms::{
    apply_pipeline, parse_pipeline, specaugment, SpecAugmentConfig, TransformError, TransformPipeline,
    TransformRegistry,
};
