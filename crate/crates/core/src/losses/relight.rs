use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envlight::EnvMap;
use crate::error::{Error, Result};

enum Pool {
    Files(Vec<PathBuf>),
    Maps(Vec<EnvMap>),
}

/// Seeded uniform draws from a pool of environment maps.
pub struct RelightSampler {
    pool: Pool,
    rng: ChaCha8Rng,
    draws: u64,
}

impl RelightSampler {
    /// Every `*.pfm` in `dir`, in file-name order. Maps load lazily.
    pub fn from_dir(dir: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("no .pfm environment maps in {}", dir.display())));
        }
        Ok(Self::with_pool(Pool::Files(files), seed))
    }

    pub fn from_maps(maps: Vec<EnvMap>, seed: u64) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("relight sampler needs at least one map".into()));
        }
        Ok(Self::with_pool(Pool::Maps(maps), seed))
    }

    fn with_pool(pool: Pool, seed: u64) -> Self {
        Self {
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn len(&self) -> usize {
        match &self.pool {
            Pool::Files(f) => f.len(),
            Pool::Maps(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of draws so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn draw_index(&mut self) -> usize {
        self.draws += 1;
        self.rng.gen_range(0..self.len())
    }

    pub fn draw(&mut self) -> Result<(usize, EnvMap)> {
        let i = self.draw_index();
        let env = match &self.pool {
            Pool::Files(f) => EnvMap::load(&f[i])?,
            Pool::Maps(m) => m[i].clone(),
        };
        Ok((i, env))
    }
}
