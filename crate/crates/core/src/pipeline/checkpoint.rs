//! Single-file binary checkpoints: config snapshot, step counter,
//! parameter tree, optimizer moments, synergy state, and the training RNG
//! position.

use super::model::SegModel;
use super::optim::AdamW;
use super::train::Trainer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sso::SynergyState;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SCSDCKP1";

pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub opt_t: u64,
    pub opt_m: Vec<ArrayD<f64>>,
    pub opt_v: Vec<ArrayD<f64>>,
    pub ref_sc: Option<f64>,
    pub ref_sa: Option<f64>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_string(&mut w, &trainer.model.config.to_toml())?;
    w.write_u64::<LittleEndian>(trainer.step)?;

    let params = trainer.params();
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, tensor) in params {
        write_string(&mut w, name)?;
        write_array(&mut w, &tensor.to_array())?;
    }

    w.write_u64::<LittleEndian>(trainer.optimizer.t)?;
    let has_moments = !trainer.optimizer.m.is_empty();
    w.write_u8(has_moments as u8)?;
    if has_moments {
        for m in &trainer.optimizer.m {
            write_array(&mut w, m)?;
        }
        for v in &trainer.optimizer.v {
            write_array(&mut w, v)?;
        }
    }

    write_opt_f64(&mut w, trainer.synergy.ref_sc)?;
    write_opt_f64(&mut w, trainer.synergy.ref_sa)?;

    w.write_u64::<LittleEndian>(trainer.rng_seed)?;
    w.write_u128::<LittleEndian>(trainer.rng.get_word_pos())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let config_text = read_string(&mut r)?;
    let config = RunConfig::from_toml(&config_text)?;
    let step = r.read_u64::<LittleEndian>()?;

    let n_params = r.read_u32::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_string(&mut r)?;
        let array = read_array(&mut r)?;
        params.push((name, array));
    }

    let opt_t = r.read_u64::<LittleEndian>()?;
    let has_moments = r.read_u8()? != 0;
    let (mut opt_m, mut opt_v) = (Vec::new(), Vec::new());
    if has_moments {
        for _ in 0..n_params {
            opt_m.push(read_array(&mut r)?);
        }
        for _ in 0..n_params {
            opt_v.push(read_array(&mut r)?);
        }
    }

    let ref_sc = read_opt_f64(&mut r)?;
    let ref_sa = read_opt_f64(&mut r)?;
    let rng_seed = r.read_u64::<LittleEndian>()?;
    let rng_word_pos = r.read_u128::<LittleEndian>()?;

    Ok(Checkpoint {
        config,
        step,
        params,
        opt_t,
        opt_m,
        opt_v,
        ref_sc,
        ref_sa,
        rng_seed,
        rng_word_pos,
    })
}

/// Rebuild a trainer (model, optimizer moments, synergy references, RNG
/// position) from a checkpoint plus the training samples.
pub fn resume_trainer(
    checkpoint: Checkpoint,
    train_samples: Vec<super::dataset::Sample>,
) -> Result<Trainer> {
    let model = SegModel::new(&checkpoint.config)?;
    // Active params were saved; fill the rest from the fresh init.
    let stored: std::collections::HashMap<String, ArrayD<f64>> =
        checkpoint.params.iter().cloned().collect();
    for (name, tensor) in model.all_params() {
        if let Some(data) = stored.get(&name) {
            if tensor.shape() != data.shape() {
                return Err(Error::shape(
                    &tensor.shape(),
                    data.shape(),
                    &format!("checkpoint parameter {name}"),
                ));
            }
            tensor.set_data(data.clone());
        }
    }
    let mut trainer = Trainer::new(model, train_samples)?;
    trainer.step = checkpoint.step;
    trainer.optimizer = {
        let cfg = &trainer.model.config.train;
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        opt.t = checkpoint.opt_t;
        opt.m = checkpoint.opt_m;
        opt.v = checkpoint.opt_v;
        opt
    };
    trainer.synergy = {
        let mut s = SynergyState::new(trainer.model.config.sso.clone());
        s.ref_sc = checkpoint.ref_sc;
        s.ref_sa = checkpoint.ref_sa;
        s
    };
    trainer.rng_seed = checkpoint.rng_seed;
    trainer.rng = ChaCha8Rng::seed_from_u64(checkpoint.rng_seed);
    trainer.rng.set_word_pos(checkpoint.rng_word_pos);
    Ok(trainer)
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Config(format!("bad string in checkpoint: {e}")))
}

fn write_array<W: Write>(w: &mut W, a: &ArrayD<f64>) -> Result<()> {
    w.write_u32::<LittleEndian>(a.ndim() as u32)?;
    for &d in a.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    ArrayD::from_shape_vec(shape, data)
        .map_err(|e| Error::Config(format!("bad array in checkpoint: {e}")))
}

fn write_opt_f64<W: Write>(w: &mut W, v: Option<f64>) -> Result<()> {
    w.write_u8(v.is_some() as u8)?;
    w.write_f64::<LittleEndian>(v.unwrap_or(0.0))?;
    Ok(())
}

fn read_opt_f64<R: Read>(r: &mut R) -> Result<Option<f64>> {
    let has = r.read_u8()? != 0;
    let v = r.read_f64::<LittleEndian>()?;
    Ok(has.then_some(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::generate_dataset;
    use crate::pipeline::train::usable_samples;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.num_queries = 6;
        cfg.model.d_q = 16;
        cfg.model.d_emb = 8;
        cfg.model.d_style = 8;
        cfg.model.heads = 2;
        cfg.model.backbone_channels = [4, 6, 8, 12];
        cfg.dataset.n_per_domain = 2;
        cfg.train.batch_size = 1;
        cfg
    }

    fn samples(cfg: &RunConfig) -> Vec<super::super::dataset::Sample> {
        let domains = cfg.ordered_domains();
        usable_samples(
            generate_dataset(
                &domains[..1],
                cfg.dataset.n_per_domain,
                cfg.dataset.layout_seed,
                cfg.dataset.image_size,
            )
            .unwrap(),
        )
    }

    #[test]
    fn save_resume_continues_identically() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");

        // Train 3 steps, checkpoint, train 2 more.
        let mut a = Trainer::new(SegModel::new(&cfg).unwrap(), samples(&cfg)).unwrap();
        for _ in 0..3 {
            a.train_step().unwrap();
        }
        save_trainer(&a, &path).unwrap();
        let mut a_next = Vec::new();
        for _ in 0..2 {
            a_next.push(a.train_step().unwrap().total);
        }

        // Resume and take the same 2 steps.
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.step, 3);
        let mut b = resume_trainer(ckpt, samples(&cfg)).unwrap();
        assert_eq!(b.step, 3);
        for expected in a_next {
            let got = b.train_step().unwrap().total;
            assert_eq!(got.to_bits(), expected.to_bits(), "resume diverged");
        }
    }

    #[test]
    fn checkpoint_preserves_step_and_config() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut t = Trainer::new(SegModel::new(&cfg).unwrap(), samples(&cfg)).unwrap();
        t.train_step().unwrap();
        save_trainer(&t, &path).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.step, 1);
        assert_eq!(ckpt.config, cfg);
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
