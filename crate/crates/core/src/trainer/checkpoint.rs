//! Versioned training snapshots: `ckpt-NNNNNN.bin` holds parameters,
//! optimizer state and the metric history; `replay-NNNNNN.bin.gz` holds both
//! replay buffers (only the newest is kept).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::episode::AttackModels;
use super::train::{EpisodeMetrics, Trainer};
use crate::actor_critic::Transition;
use crate::config::Config;
use crate::detector::Detector;
use crate::dyn_autoencoder::{decode_trajectories, encode_trajectories};
use crate::nn::codec::{decode_adam, decode_params, encode_adam, encode_params, DecodeError, Reader, Writer};
use crate::nn::{Adam, ParamSet};
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"ADVCKP01";
const REPLAY_MAGIC: &[u8; 8] = b"ADVRPL01";
pub const LATEST_FILE: &str = "latest";

pub fn checkpoint_name(episode: usize) -> String {
    format!("ckpt-{episode:06}.bin")
}

fn replay_name(episode: usize) -> String {
    format!("replay-{episode:06}.bin.gz")
}

/// Identity of a checkpoint, read without touching the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub config_digest: String,
    pub detector_digest: String,
    pub next_episode: usize,
    pub skip_streak: usize,
}

fn encode_checkpoint(t: &Trainer) -> Vec<u8> {
    let m = &t.models;
    let mut w = Writer::new();
    w.bytes(CKPT_MAGIC);
    w.str(&t.cfg.digest());
    w.str(&t.detector.params.digest());
    w.u64(t.next_episode as u64);
    w.u64(t.skip_streak as u64);
    for p in [
        &m.generator.params,
        &m.sys.params,
        &m.agent.actor.params,
        &m.agent.critic.params,
        &m.agent.actor_target,
        &m.agent.critic_target,
    ] {
        encode_params(p, &mut w);
    }
    for o in [&m.img_opt, &m.sys_opt, &m.agent.actor_opt, &m.agent.critic_opt] {
        encode_adam(o, &mut w);
    }
    w.str(&serde_json::to_string(&t.metrics).expect("metrics serialize"));
    w.buf
}

fn encode_replay(t: &Trainer) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(REPLAY_MAGIC);
    w.u64(t.transitions.len() as u64);
    for tr in t.transitions.iter() {
        w.u64(tr.h.len() as u64);
        w.f32s(tr.h.iter().copied());
        w.f32s(tr.h_next.iter().copied());
        for v in tr.a {
            w.f64(v);
        }
        w.f64(tr.r);
        w.u64(tr.done as u64);
    }
    let trajs: Vec<_> = t.trajectories.episodes.iter().cloned().collect();
    w.bytes(&encode_trajectories(&trajs));
    w.buf
}

fn fmt_err(path: &Path) -> impl Fn(DecodeError) -> Error + '_ {
    move |e| Error::Format(format!("{}: {}", path.display(), e.0))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a snapshot of `t` into `dir` and returns the checkpoint path.
pub fn save(t: &Trainer, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(checkpoint_name(t.next_episode));
    write_file(&ckpt, &encode_checkpoint(t))?;
    let replay = dir.join(replay_name(t.next_episode));
    let file = std::fs::File::create(&replay).map_err(|e| Error::io(&replay, e))?;
    let mut gz = GzEncoder::new(file, Compression::fast());
    gz.write_all(&encode_replay(t)).map_err(|e| Error::io(&replay, e))?;
    gz.finish().map_err(|e| Error::io(&replay, e))?;
    let keep = replay_name(t.next_episode);
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("replay-") && name != keep {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(&entry.path(), e))?;
        }
    }
    write_file(&dir.join(LATEST_FILE), checkpoint_name(t.next_episode).as_bytes())?;
    Ok(ckpt)
}

/// Path of the newest checkpoint recorded in `dir`.
pub fn latest(dir: &Path) -> Result<PathBuf> {
    let p = dir.join(LATEST_FILE);
    let name = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(dir.join(name.trim()))
}

fn restore(dst: &mut ParamSet<f32>, src: ParamSet<f32>, what: &str, path: &Path) -> Result<()> {
    let same = dst.names() == src.names()
        && dst.tensors().iter().zip(src.tensors()).all(|(a, b)| a.shape() == b.shape());
    if !same {
        return Err(Error::Format(format!(
            "{}: {what} parameters do not match the configured architecture",
            path.display()
        )));
    }
    *dst = src;
    Ok(())
}

fn restore_adam(dst: &mut Adam, src: Adam, what: &str, path: &Path) -> Result<()> {
    let same = dst.m.len() == src.m.len() && dst.m.iter().zip(&src.m).all(|(a, b)| a.len() == b.len());
    if !same {
        return Err(Error::Format(format!("{}: {what} optimizer state has the wrong layout", path.display())));
    }
    *dst = src;
    Ok(())
}

/// Reads a checkpoint into freshly built models for `cfg`.
pub fn load_models(cfg: &Config, path: &Path) -> Result<(AttackModels, CheckpointHeader, Vec<EpisodeMetrics>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = fmt_err(path);
    let mut r = Reader::new(&bytes);
    r.expect(CKPT_MAGIC).map_err(&err)?;
    let header = CheckpointHeader {
        config_digest: r.str().map_err(&err)?,
        detector_digest: r.str().map_err(&err)?,
        next_episode: r.len().map_err(&err)?,
        skip_streak: r.len().map_err(&err)?,
    };
    let mut m = AttackModels::new(cfg);
    let mut next = || decode_params::<f32>(&mut r).map_err(&err);
    let (g, s, a, c, at, ct) = (next()?, next()?, next()?, next()?, next()?, next()?);
    restore(&mut m.generator.params, g, "generator", path)?;
    restore(&mut m.sys.params, s, "estimator", path)?;
    restore(&mut m.agent.actor.params, a, "actor", path)?;
    restore(&mut m.agent.critic.params, c, "critic", path)?;
    restore(&mut m.agent.actor_target, at, "target actor", path)?;
    restore(&mut m.agent.critic_target, ct, "target critic", path)?;
    let mut next = || decode_adam(&mut r).map_err(&err);
    let (oi, os, oa, oc) = (next()?, next()?, next()?, next()?);
    restore_adam(&mut m.img_opt, oi, "generator", path)?;
    restore_adam(&mut m.sys_opt, os, "estimator", path)?;
    restore_adam(&mut m.agent.actor_opt, oa, "actor", path)?;
    restore_adam(&mut m.agent.critic_opt, oc, "critic", path)?;
    let metrics_json = r.str().map_err(&err)?;
    if !r.finished() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    let metrics = serde_json::from_str(&metrics_json).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((m, header, metrics))
}

/// Restores a complete trainer to continue training from `path`.
pub fn load(cfg: &Config, detector: Detector<f32>, path: &Path) -> Result<Trainer> {
    let (models, header, metrics) = load_models(cfg, path)?;
    if header.config_digest != cfg.digest() {
        return Err(Error::Config(format!(
            "{} was written under a different configuration",
            path.display()
        )));
    }
    if header.detector_digest != detector.params.digest() {
        return Err(Error::Config(format!("{} was trained against a different detector", path.display())));
    }
    let mut t = Trainer::new(cfg, detector)?;
    t.models = models;
    t.metrics = metrics;
    t.next_episode = header.next_episode;
    t.skip_streak = header.skip_streak;

    let replay = path.with_file_name(replay_name(header.next_episode));
    let file = std::fs::File::open(&replay).map_err(|e| Error::io(&replay, e))?;
    let mut bytes = Vec::new();
    GzDecoder::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(&replay, e))?;
    let err = fmt_err(&replay);
    let mut r = Reader::new(&bytes);
    r.expect(REPLAY_MAGIC).map_err(&err)?;
    let n = r.len().map_err(&err)?;
    for _ in 0..n {
        let d = r.len().map_err(&err)?;
        let h = r.f32s(d).map_err(&err)?;
        let h_next = r.f32s(d).map_err(&err)?;
        let a = [r.f64().map_err(&err)?, r.f64().map_err(&err)?, r.f64().map_err(&err)?];
        let rew = r.f64().map_err(&err)?;
        let done = r.u64().map_err(&err)? != 0;
        t.transitions.push(Transition {
            h,
            a,
            r: rew,
            h_next,
            done,
        });
    }
    let rest = r.rest();
    for traj in decode_trajectories(rest).map_err(|m| Error::Format(format!("{}: {m}", replay.display())))? {
        t.trajectories.push(traj);
    }
    Ok(t)
}
