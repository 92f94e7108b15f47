//! Recorded image/action streams, stored as 8-bit frames.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;

use super::sample_hidden;
use crate::nn::codec::{Reader, Writer};
use crate::sim_env::Image;
use crate::{Error, Result};

const ARCHIVE_MAGIC: &[u8; 8] = b"ADVTRJ01";

/// One episode's `(x_t, a_t)` pairs: `frames[t]` is the clean frame the
/// attacker saw and `actions[t]` the command it issued on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub scenario: u8,
    pub seed: u64,
    pub size: usize,
    pub frames: Vec<Vec<u8>>,
    pub actions: Vec<[f64; 3]>,
}

impl Trajectory {
    pub fn new(scenario: u8, seed: u64, size: usize) -> Self {
        Self {
            scenario,
            seed,
            size,
            frames: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &Image, a: [f64; 3]) {
        assert_eq!(x.shape(), [3, self.size, self.size], "frame shape mismatch");
        self.frames.push(x.to_u8());
        self.actions.push(a);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> Image {
        Image::from_u8(self.size, self.size, 3, &self.frames[t])
    }
}

/// Teacher-forcing window: `frames` holds `T + 1` consecutive frames,
/// `actions` the `T` actions taken on the first `T` of them.
#[derive(Clone, Debug)]
pub struct Window {
    pub frames: Vec<Image>,
    pub actions: Vec<[f64; 3]>,
    pub h0: Vec<f32>,
}

/// FIFO of the most recent episodes.
#[derive(Clone, Debug)]
pub struct TrajectoryBuffer {
    pub capacity: usize,
    pub episodes: VecDeque<Trajectory>,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            episodes: VecDeque::new(),
        }
    }

    pub fn push(&mut self, t: Trajectory) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// `m` windows of `t` steps, each from a uniformly drawn episode long
    /// enough to hold one, with a fresh `h₀ ~ N(0, I)`. Empty when no
    /// episode qualifies.
    pub fn sample_windows(&self, rng: &mut impl Rng, m: usize, t: usize, hidden: usize) -> Vec<Window> {
        let eligible: Vec<&Trajectory> = self.episodes.iter().filter(|e| e.len() > t).collect();
        if eligible.is_empty() {
            return Vec::new();
        }
        (0..m)
            .map(|_| {
                let e = eligible[rng.random_range(0..eligible.len())];
                let s = rng.random_range(0..e.len() - t);
                Window {
                    frames: (s..=s + t).map(|i| e.frame(i)).collect(),
                    actions: e.actions[s..s + t].to_vec(),
                    h0: sample_hidden(hidden, rng),
                }
            })
            .collect()
    }

    /// `m` recorded `(x, a)` pairs: uniform episode, then uniform step.
    pub fn sample_pairs(&self, rng: &mut impl Rng, m: usize) -> Vec<(Image, [f64; 3])> {
        let eligible: Vec<&Trajectory> = self.episodes.iter().filter(|e| !e.is_empty()).collect();
        if eligible.is_empty() {
            return Vec::new();
        }
        (0..m)
            .map(|_| {
                let e = eligible[rng.random_range(0..eligible.len())];
                let i = rng.random_range(0..e.len());
                (e.frame(i), e.actions[i])
            })
            .collect()
    }
}

pub(crate) fn encode_trajectories(trajs: &[Trajectory]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(ARCHIVE_MAGIC);
    w.u64(trajs.len() as u64);
    for t in trajs {
        w.u64(t.scenario as u64);
        w.u64(t.seed);
        w.u64(t.size as u64);
        w.u64(t.len() as u64);
        for (f, a) in t.frames.iter().zip(&t.actions) {
            w.bytes(f);
            for v in a {
                w.f64(*v);
            }
        }
    }
    w.buf
}

pub(crate) fn decode_trajectories(buf: &[u8]) -> std::result::Result<Vec<Trajectory>, String> {
    let mut r = Reader::new(buf);
    let e = |d: crate::nn::codec::DecodeError| d.0;
    r.expect(ARCHIVE_MAGIC).map_err(e)?;
    let n = r.len().map_err(e)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let scenario = u8::try_from(r.u64().map_err(e)?).map_err(|_| "bad scenario".to_string())?;
        let seed = r.u64().map_err(e)?;
        let size = r.len().map_err(e)?;
        let len = r.len().map_err(e)?;
        let mut t = Trajectory::new(scenario, seed, size);
        for _ in 0..len {
            t.frames.push(r.bytes(3 * size * size).map_err(e)?.to_vec());
            t.actions.push([r.f64().map_err(e)?, r.f64().map_err(e)?, r.f64().map_err(e)?]);
        }
        out.push(t);
    }
    if !r.finished() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

/// Writes a gzip-compressed archive of whole episodes.
pub fn save_archive(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut gz = GzEncoder::new(file, Compression::fast());
    gz.write_all(&encode_trajectories(trajs)).map_err(|e| Error::io(path, e))?;
    gz.finish().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    GzDecoder::new(file).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    decode_trajectories(&buf).map_err(|m| Error::Format(format!("{}: {m}", path.display())))
}
