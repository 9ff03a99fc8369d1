//! Versioned binary checkpoint: named f64 tensors, little-endian, holding
//! the cloud, the networks, optimizer moments, the consistency memory, and
//! the training RNG position. Restoring reproduces the run state exactly
//! (f32 values round-trip losslessly through f64).

use crate::config::RunConfig;
use crate::error::Error;
use crate::losses::ConsistencyMemory;
use crate::math::{real, Real};
use crate::nn::AdamState;
use crate::train::{Model, OptimizerState, Trainer, NET_NAMES};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HSCK";
const VERSION: u32 = 1;

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<(), Error> {
        self.w.write_all(&v.to_le_bytes()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn u64(&mut self, v: u64) -> Result<(), Error> {
        self.w.write_all(&v.to_le_bytes()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn bytes(&mut self, v: &[u8]) -> Result<(), Error> {
        self.u64(v.len() as u64)?;
        self.w.write_all(v).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn tensor<T: Real>(&mut self, name: &str, data: impl Iterator<Item = T>) -> Result<(), Error> {
        self.bytes(name.as_bytes())?;
        let values: Vec<f64> = data.map(|v| v.to_f64().unwrap()).collect();
        self.u64(values.len() as u64)?;
        for v in values {
            self.w
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, Error> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, Error> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(u64::from_le_bytes(b))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, Error> {
        let len = self.u64()? as usize;
        let mut out = vec![0u8; len];
        self.r.read_exact(&mut out).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(out)
    }
    fn tensor(&mut self, want: &str) -> Result<Vec<f64>, Error> {
        let name = String::from_utf8(self.bytes()?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        if name != want {
            return Err(Error::Checkpoint(format!("expected tensor '{want}', found '{name}'")));
        }
        let len = self.u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            self.r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }
}

fn flat_vec3<T: Real>(v: &[Vector3<T>]) -> impl Iterator<Item = T> + '_ {
    v.iter().flat_map(|x| [x.x, x.y, x.z])
}

/// Write the full trainer state.
pub fn save<T: Real>(trainer: &Trainer<T>, path: &Path) -> Result<(), Error> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer { w: std::io::BufWriter::new(file) };
    w.w.write_all(MAGIC).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.u32(VERSION)?;
    w.u64(trainer.iteration as u64)?;
    w.bytes(serde_json::to_string(&trainer.model.config)?.as_bytes())?;

    let model = &trainer.model;
    let cloud = &model.cloud;
    w.u64(cloud.len() as u64)?;
    w.u64(cloud.embed_dim as u64)?;
    w.tensor("cloud.position", flat_vec3(&cloud.positions))?;
    w.tensor("cloud.rotation", cloud.rotations.iter().flatten().copied())?;
    w.tensor("cloud.log_scale", flat_vec3(&cloud.log_scales))?;
    w.tensor("cloud.color", flat_vec3(&cloud.colors))?;
    w.tensor("cloud.opacity", cloud.opacity_logits.iter().copied())?;
    w.tensor("cloud.e_g", cloud.e_g.iter().copied())?;
    w.tensor("cloud.e_a", cloud.e_a.iter().copied())?;
    w.tensor("cloud.skin", cloud.skin_weights.iter().copied())?;

    for (k, name) in NET_NAMES.iter().enumerate() {
        let net = match k {
            0 => &model.decoders.geo,
            1 => &model.decoders.app,
            2 => &model.decoders.fusion,
            3 => &model.generator.net,
            _ => &model.phi_pose,
        };
        w.u64(net.dims.len() as u64)?;
        for &dim in &net.dims {
            w.u64(dim as u64)?;
        }
        for (l, weights) in net.weights.iter().enumerate() {
            w.tensor(&format!("{name}.w{l}"), weights.iter().copied())?;
        }
        for (l, biases) in net.biases.iter().enumerate() {
            w.tensor(&format!("{name}.b{l}"), biases.iter().copied())?;
        }
        w.tensor(&format!("{name}.gate"), std::iter::once(net.gate))?;
    }

    // Optimizer moments.
    let opt = &trainer.optimizer;
    let states: Vec<(&str, &AdamState<T>)> = vec![
        ("adam.position", &opt.positions),
        ("adam.rotation", &opt.rotations),
        ("adam.log_scale", &opt.log_scales),
        ("adam.color", &opt.colors),
        ("adam.opacity", &opt.opacity),
        ("adam.e_g", &opt.e_g),
        ("adam.e_a", &opt.e_a),
    ];
    for (name, st) in states {
        w.tensor(&format!("{name}.m"), st.m.iter().copied())?;
        w.tensor(&format!("{name}.v"), st.v.iter().copied())?;
        w.u64(st.steps)?;
        w.u64(st.skipped)?;
    }
    for (k, name) in NET_NAMES.iter().enumerate() {
        let st = &opt.nets[k];
        w.tensor(&format!("adam.{name}.m"), st.m.iter().copied())?;
        w.tensor(&format!("adam.{name}.v"), st.v.iter().copied())?;
        w.u64(st.steps)?;
        w.u64(st.skipped)?;
    }

    // Consistency memory.
    match &trainer.memory {
        Some(mem) => {
            w.u32(1)?;
            w.u64(mem.width as u64)?;
            w.u64(mem.count as u64)?;
            w.tensor("memory.bundles", mem.bundles.iter().copied())?;
            w.tensor("memory.positions", flat_vec3(&mem.positions))?;
            w.tensor("memory.pose", mem.prev_pose.iter().copied())?;
        }
        None => w.u32(0)?,
    }

    // RNG position.
    let pos = trainer.rng.get_word_pos();
    w.u64(trainer.model.config.seed)?;
    w.u64((pos & 0xffff_ffff_ffff_ffff) as u64)?;
    w.u64((pos >> 64) as u64)?;
    w.u64(trainer.nonfinite_incidents)?;
    w.u64(trainer.last_frame_pose.map(|f| f as u64).unwrap_or(u64::MAX))?;
    w.tensor("stats.accum", trainer.stats.accum.iter().map(|&v| v))?;
    w.u64(trainer.stats.count.len() as u64)?;
    for &c in &trainer.stats.count {
        w.u64(c as u64)?;
    }
    w.w.flush().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

/// Restored state, generic over precision; the caller re-attaches frames.
pub struct Restored<T: Real> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub memory: Option<ConsistencyMemory<T>>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub nonfinite_incidents: u64,
    pub last_frame_pose: Option<usize>,
    pub stats: crate::gaussians::GradStats,
    pub config: RunConfig,
}

pub fn load<T: Real>(path: &Path) -> Result<Restored<T>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { r: std::io::BufReader::new(file) };
    let mut magic = [0u8; 4];
    r.r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    if r.u32()? != VERSION {
        return Err(Error::Checkpoint("unsupported checkpoint version".into()));
    }
    let iteration = r.u64()? as usize;
    let config: RunConfig = serde_json::from_slice(&r.bytes()?)?;
    let mut model = Model::<T>::new(&config)?;

    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let to_vec3 = |flat: Vec<f64>| -> Vec<Vector3<T>> {
        flat.chunks_exact(3)
            .map(|c| Vector3::new(real(c[0]), real(c[1]), real(c[2])))
            .collect()
    };
    model.cloud.positions = to_vec3(r.tensor("cloud.position")?);
    model.cloud.rotations = r
        .tensor("cloud.rotation")?
        .chunks_exact(4)
        .map(|c| [real(c[0]), real(c[1]), real(c[2]), real(c[3])])
        .collect();
    model.cloud.log_scales = to_vec3(r.tensor("cloud.log_scale")?);
    model.cloud.colors = to_vec3(r.tensor("cloud.color")?);
    model.cloud.opacity_logits = r.tensor("cloud.opacity")?.into_iter().map(real).collect();
    model.cloud.e_g = r.tensor("cloud.e_g")?.into_iter().map(real).collect();
    model.cloud.e_a = r.tensor("cloud.e_a")?.into_iter().map(real).collect();
    model.cloud.skin_weights = r.tensor("cloud.skin")?.into_iter().map(real).collect();
    model.cloud.embed_dim = d;
    if model.cloud.positions.len() != n {
        return Err(Error::Checkpoint("cloud size mismatch".into()));
    }

    for (k, name) in NET_NAMES.iter().enumerate() {
        let ndims = r.u64()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u64()? as usize);
        }
        let net = match k {
            0 => &mut model.decoders.geo,
            1 => &mut model.decoders.app,
            2 => &mut model.decoders.fusion,
            3 => &mut model.generator.net,
            _ => &mut model.phi_pose,
        };
        if net.dims != dims {
            return Err(Error::Checkpoint(format!("net '{name}' shape mismatch")));
        }
        for l in 0..net.weights.len() {
            let w = r.tensor(&format!("{name}.w{l}"))?;
            net.weights[l] = w.into_iter().map(real).collect();
        }
        for l in 0..net.biases.len() {
            let b = r.tensor(&format!("{name}.b{l}"))?;
            net.biases[l] = b.into_iter().map(real).collect();
        }
        net.gate = real(r.tensor(&format!("{name}.gate"))?[0]);
    }

    let mut optimizer = OptimizerState::new(&model);
    {
        let mut read_state = |name: &str, st: &mut AdamState<T>| -> Result<(), Error> {
            st.m = r.tensor(&format!("{name}.m"))?.into_iter().map(real).collect();
            st.v = r.tensor(&format!("{name}.v"))?.into_iter().map(real).collect();
            st.steps = r.u64()?;
            st.skipped = r.u64()?;
            Ok(())
        };
        read_state("adam.position", &mut optimizer.positions)?;
        read_state("adam.rotation", &mut optimizer.rotations)?;
        read_state("adam.log_scale", &mut optimizer.log_scales)?;
        read_state("adam.color", &mut optimizer.colors)?;
        read_state("adam.opacity", &mut optimizer.opacity)?;
        read_state("adam.e_g", &mut optimizer.e_g)?;
        read_state("adam.e_a", &mut optimizer.e_a)?;
        for (k, name) in NET_NAMES.iter().enumerate() {
            let st = &mut optimizer.nets[k];
            st.m = r.tensor(&format!("adam.{name}.m"))?.into_iter().map(real).collect();
            st.v = r.tensor(&format!("adam.{name}.v"))?.into_iter().map(real).collect();
            st.steps = r.u64()?;
            st.skipped = r.u64()?;
        }
    }

    let memory = if r.u32()? == 1 {
        let width = r.u64()? as usize;
        let count = r.u64()? as usize;
        let bundles: Vec<T> = r.tensor("memory.bundles")?.into_iter().map(real).collect();
        let positions = to_vec3(r.tensor("memory.positions")?);
        let pose: Vec<T> = r.tensor("memory.pose")?.into_iter().map(real).collect();
        let mut mem = ConsistencyMemory::seed(
            bundles,
            width,
            positions,
            pose,
            real(config.ema_decay),
        );
        mem.count = count;
        Some(mem)
    } else {
        None
    };

    let seed = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos((hi << 64) | lo);
    let nonfinite_incidents = r.u64()?;
    let last_raw = r.u64()?;
    let last_frame_pose = if last_raw == u64::MAX { None } else { Some(last_raw as usize) };
    let accum = r.tensor("stats.accum")?;
    let count_len = r.u64()? as usize;
    let mut count = Vec::with_capacity(count_len);
    for _ in 0..count_len {
        count.push(r.u64()? as u32);
    }
    let stats = crate::gaussians::GradStats { accum, count };

    Ok(Restored {
        model,
        optimizer,
        memory,
        iteration,
        rng,
        nonfinite_incidents,
        last_frame_pose,
        stats,
        config,
    })
}

impl<T: Real> Trainer<T> {
    /// Rebuild a trainer from a checkpoint plus the dataset it trained on.
    pub fn resume(
        path: &Path,
        manifest: &crate::data::DatasetManifest,
        data_root: &Path,
        out_dir: Option<std::path::PathBuf>,
    ) -> Result<Self, Error> {
        let restored = load::<T>(path)?;
        let mut trainer = Trainer::new(&restored.config, manifest, data_root, out_dir)?;
        trainer.model = restored.model;
        trainer.optimizer = restored.optimizer;
        trainer.memory = restored.memory;
        trainer.iteration = restored.iteration;
        trainer.rng = restored.rng;
        trainer.nonfinite_incidents = restored.nonfinite_incidents;
        trainer.last_frame_pose = restored.last_frame_pose;
        trainer.stats = restored.stats;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, render_dataset, SceneConfig};

    fn tiny_config() -> RunConfig {
        RunConfig {
            dynamic_bones: 2,
            embed_dim: 4,
            hidden_width: 8,
            iterations: 2,
            scene: SceneConfig {
                oracle_gaussians: 300,
                cameras_train: 2,
                cameras_novel: 1,
                frames: 4,
                frames_novel: 1,
                resolution: 32,
                seed: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trips_trainer_state() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let scene = generate_scene::<f32>(&config.scene).unwrap();
        let manifest = render_dataset(&scene, dir.path()).unwrap();
        let mut trainer = Trainer::<f32>::new(&config, &manifest, dir.path(), None).unwrap();
        trainer.step().unwrap();
        trainer.step().unwrap();

        let ckpt = dir.path().join("ck.bin");
        save(&trainer, &ckpt).unwrap();
        let restored: Restored<f32> = load(&ckpt).unwrap();
        assert_eq!(restored.iteration, 2);
        assert_eq!(restored.model.cloud.positions, trainer.model.cloud.positions);
        assert_eq!(restored.model.decoders.geo.weights, trainer.model.decoders.geo.weights);
        assert_eq!(restored.optimizer.positions.m, trainer.optimizer.positions.m);
        assert_eq!(restored.rng.get_word_pos(), trainer.rng.get_word_pos());
        let (a, b) = (restored.memory.unwrap(), trainer.memory.as_ref().unwrap());
        assert_eq!(a.bundles, b.bundles);
        assert_eq!(a.prev_pose, b.prev_pose);
    }

    #[test]
    fn resumed_trainer_continues_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let scene = generate_scene::<f32>(&config.scene).unwrap();
        let manifest = render_dataset(&scene, dir.path()).unwrap();

        // Run 4 steps straight through.
        let mut straight = Trainer::<f32>::new(&config, &manifest, dir.path(), None).unwrap();
        for _ in 0..4 {
            straight.step().unwrap();
        }

        // Run 2, checkpoint, resume, run 2 more.
        let mut first = Trainer::<f32>::new(&config, &manifest, dir.path(), None).unwrap();
        first.step().unwrap();
        first.step().unwrap();
        let ckpt = dir.path().join("ck.bin");
        save(&first, &ckpt).unwrap();
        let mut resumed = Trainer::<f32>::resume(&ckpt, &manifest, dir.path(), None).unwrap();
        resumed.step().unwrap();
        resumed.step().unwrap();

        assert_eq!(resumed.model.cloud.positions, straight.model.cloud.positions);
        assert_eq!(resumed.model.cloud.e_g, straight.model.cloud.e_g);
        assert_eq!(
            resumed.model.decoders.fusion.weights,
            straight.model.decoders.fusion.weights
        );
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
