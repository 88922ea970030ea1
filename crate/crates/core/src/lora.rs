//! Low-rank adapters: M' = M + (alpha / r) A B with A (d_out x r) Gaussian
//! and B (r x d_in) zero at initialisation. Only A and B are trained.

use std::collections::BTreeMap;

use autograd::{clip_global_norm, gemm, Adam, AdamConfig, Graph, MatRef, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::CodecParams;
use crate::denoiser::{self, DenoiserParams, EpochSampler, Net, TrainConfig, TrainExample};
use crate::error::{invalid, Error, Result};
use crate::phantom::LabeledImage;
use crate::scheduler::NoiseSchedule;
use crate::seed;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// (d_out, r)
    pub a: Tensor,
    /// (r, d_in)
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn num_trainable(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// (alpha / r) A B as a dense (d_out, d_in) matrix.
    pub fn delta(&self) -> Tensor {
        let (m, n) = (self.d_out(), self.d_in());
        let mut out = vec![0.0; m * n];
        gemm(
            self.scale(),
            MatRef::row_major(self.a.data(), m, self.rank),
            MatRef::row_major(self.b.data(), self.rank, n),
            0.0,
            &mut out,
        );
        Tensor::new(vec![m, n], out)
    }

    fn check_matrix(&self, m: &Tensor) -> Result<()> {
        if m.shape() != [self.d_out(), self.d_in()] {
            return Err(Error::Shape(format!(
                "adapter for `{}` is {}x{}, matrix is {:?}",
                self.target,
                self.d_out(),
                self.d_in(),
                m.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: BTreeMap<String, LoraAdapter>,
}

pub fn init_adapters(registry: &BTreeMap<String, (usize, usize)>, rank: usize, alpha: f64, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(invalid("LoRA rank must be at least 1"));
    }
    if !(alpha > 0.0) {
        return Err(invalid("LoRA alpha must be positive"));
    }
    let mut adapters = BTreeMap::new();
    for (name, &(d_out, d_in)) in registry {
        let d = d_out.min(d_in);
        if rank > d / 2 {
            return Err(invalid(format!("rank {rank} exceeds d/2 = {} for `{name}`", d / 2)));
        }
        let mut rng = seed::rng_for(seed::derive(seed, "lora/init"), name);
        let a = Tensor::randn(&[d_out, rank], 1.0 / (d_out as f64).sqrt(), &mut rng);
        let b = Tensor::zeros(&[rank, d_in]);
        adapters.insert(name.clone(), LoraAdapter { target: name.clone(), a, b, rank, alpha });
    }
    Ok(AdapterSet { rank, alpha, adapters })
}

impl AdapterSet {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Sum of 2 d r over adapters (for square d x d targets).
    pub fn num_trainable(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_trainable).sum()
    }

    /// Flatten to `{layer}.lora_a` / `{layer}.lora_b` tensors.
    pub fn to_params(&self) -> ParamSet {
        self.adapters
            .iter()
            .flat_map(|(k, a)| [(format!("{k}.lora_a"), a.a.clone()), (format!("{k}.lora_b"), a.b.clone())])
            .collect()
    }

    pub fn update_from_params(&mut self, p: &ParamSet) -> Result<()> {
        for (k, a) in self.adapters.iter_mut() {
            a.a = p.require(&format!("{k}.lora_a"))?.clone();
            a.b = p.require(&format!("{k}.lora_b"))?.clone();
        }
        Ok(())
    }

    /// Every adapter must target a registry layer of matching shape.
    pub fn check_against(&self, registry: &BTreeMap<String, (usize, usize)>) -> Result<()> {
        for (k, a) in &self.adapters {
            match registry.get(k) {
                Some(&(o, i)) if o == a.d_out() && i == a.d_in() => {}
                Some(s) => return Err(Error::Shape(format!("adapter `{k}` is {}x{}, layer is {s:?}", a.d_out(), a.d_in()))),
                None => return Err(invalid(format!("adapter target `{k}` is not in the attachment registry"))),
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "lora",
            "rank": self.rank,
            "alpha": self.alpha,
            "targets": self.adapters.keys().collect::<Vec<_>>(),
        });
        Checkpoint::new(meta, self.to_params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "lora" {
            return Err(Error::Checkpoint("not a LoRA checkpoint".into()));
        }
        let field = |k: &str| ck.metadata.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let rank = field("rank")?.as_u64().ok_or_else(|| Error::Checkpoint("bad rank".into()))? as usize;
        let alpha = field("alpha")?.as_f64().ok_or_else(|| Error::Checkpoint("bad alpha".into()))?;
        let targets: Vec<String> = serde_json::from_value(field("targets")?.clone())?;
        let mut adapters = BTreeMap::new();
        for t in targets {
            let a = ck.tensors.require(&format!("{t}.lora_a"))?.clone();
            let b = ck.tensors.require(&format!("{t}.lora_b"))?.clone();
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != rank || b.shape()[0] != rank {
                return Err(Error::Checkpoint(format!("adapter `{t}` does not have rank {rank}")));
            }
            adapters.insert(t.clone(), LoraAdapter { target: t, a, b, rank, alpha });
        }
        if ck.tensors.len() != 2 * adapters.len() {
            return Err(Error::Checkpoint("unexpected tensors in LoRA checkpoint".into()));
        }
        Ok(Self { rank, alpha, adapters })
    }
}

/// (M + (alpha / r) A B) x, without forming the merged matrix.
pub fn adapted_forward(m: &Tensor, adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    adapter.check_matrix(m)?;
    if x.len() != adapter.d_in() {
        return Err(Error::Shape(format!("input has {} values, layer takes {}", x.len(), adapter.d_in())));
    }
    let (o, i, r) = (adapter.d_out(), adapter.d_in(), adapter.rank);
    let mut y = vec![0.0; o];
    gemm(1.0, MatRef::row_major(m.data(), o, i), MatRef::row_major(x, i, 1), 0.0, &mut y);
    let mut h = vec![0.0; r];
    gemm(1.0, MatRef::row_major(adapter.b.data(), r, i), MatRef::row_major(x, i, 1), 0.0, &mut h);
    gemm(adapter.scale(), MatRef::row_major(adapter.a.data(), o, r), MatRef::row_major(&h, r, 1), 1.0, &mut y);
    Ok(y)
}

pub fn merge(m: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check_matrix(m)?;
    let d = adapter.delta();
    Ok(m.zip_map(&d, |a, b| a + b))
}

pub fn unmerge(merged: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check_matrix(merged)?;
    let d = adapter.delta();
    Ok(merged.zip_map(&d, |a, b| a - b))
}

/// Copy of the base parameters with every adapter folded in.
pub fn merge_into(base: &DenoiserParams, adapters: &AdapterSet) -> Result<DenoiserParams> {
    adapters.check_against(&base.attachment_registry())?;
    let mut out = base.clone();
    for (k, a) in &adapters.adapters {
        let name = format!("{k}.w");
        let merged = merge(out.params.require(&name)?, a)?;
        out.params.insert(name, merged);
    }
    Ok(out)
}

pub fn unmerge_from(merged: &DenoiserParams, adapters: &AdapterSet) -> Result<DenoiserParams> {
    let mut out = merged.clone();
    for (k, a) in &adapters.adapters {
        let name = format!("{k}.w");
        let base = unmerge(out.params.require(&name)?, a)?;
        out.params.insert(name, base);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterAccounting {
    pub trainable: usize,
    pub base_total: usize,
    pub trainable_fraction: f64,
    /// Layer -> 2 d r.
    pub per_layer: BTreeMap<String, usize>,
}

pub fn parameter_accounting(base: &DenoiserParams, adapters: &AdapterSet) -> ParameterAccounting {
    let trainable = adapters.num_trainable();
    let base_total = base.num_parameters();
    ParameterAccounting {
        trainable,
        base_total,
        trainable_fraction: trainable as f64 / base_total as f64,
        per_layer: adapters.adapters.iter().map(|(k, a)| (k.clone(), a.num_trainable())).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraReport {
    pub losses: Vec<f64>,
    pub validation_start: f64,
    pub validation_end: f64,
    pub base_fingerprint: u64,
    pub null_uses: usize,
}

pub fn finetune_lora(
    base: &DenoiserParams,
    adapters: AdapterSet,
    codec: &CodecParams,
    images: &[LabeledImage],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(AdapterSet, LoraReport)> {
    let examples = denoiser::encode_examples(codec, images)?;
    finetune_on_examples(base, adapters, &examples, schedule, config)
}

pub fn finetune_on_examples(
    base: &DenoiserParams,
    mut adapters: AdapterSet,
    examples: &[TrainExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(AdapterSet, LoraReport)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(invalid("LoRA fine-tuning needs a non-empty dataset"));
    }
    adapters.check_against(&base.attachment_registry())?;
    let before = base.params.fingerprint();
    let val = denoiser::validation_batch(examples, schedule, config.gamma, config.seed)?;
    let mut report = LoraReport {
        validation_start: denoiser::eval_loss(base, Some(&adapters), &val)?,
        base_fingerprint: before,
        ..Default::default()
    };
    let mut rng = seed::rng_for(config.seed, "lora/train");
    let mut sampler = EpochSampler::new(examples.len());
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut trainable = adapters.to_params();
    let scale = adapters.scale();

    for it in 0..config.iterations {
        let idx = sampler.next_batch(config.batch_size, &mut rng);
        let chosen: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch =
            denoiser::noised_batch(&chosen, schedule, config.gamma, config.guidance_dropout, &mut rng, &mut report.null_uses)?;
        let mut g = Graph::new();
        let bb = base.params.bind(&mut g, false);
        let lb = trainable.bind(&mut g, true);
        let net = Net { base: &bb, lora: Some((&lb, scale)) };
        let loss = denoiser::batch_loss(&mut g, &net, &batch)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("LoRA loss {lv}") });
        }
        let mut grads = g.backward(loss);
        let mut gmap = lb.grads(&g, &mut grads);
        clip_global_norm(&mut gmap, config.grad_clip);
        opt.step(&mut trainable, &gmap, crate::nn::cosine_lr(config.lr, it, config.iterations));
        report.losses.push(lv);
        if (it + 1) % 500 == 0 {
            log::info!("lora it {} loss {:.4}", it + 1, denoiser::mean_tail(&report.losses, 100));
        }
    }
    crate::checkpoint::quantize_f32(&mut trainable);
    adapters.update_from_params(&trainable)?;
    let after = base.params.fingerprint();
    if after != before {
        return Err(Error::BaseMutated { before, after });
    }
    report.validation_end = denoiser::eval_loss(base, Some(&adapters), &val)?;
    Ok((adapters, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> BTreeMap<String, (usize, usize)> {
        [("l".to_string(), (64, 64))].into_iter().collect()
    }

    #[test]
    fn rank_limits() {
        assert!(init_adapters(&registry(), 33, 33.0, 0).is_err());
        assert!(init_adapters(&registry(), 32, 32.0, 0).is_ok());
        assert!(init_adapters(&registry(), 0, 1.0, 0).is_err());
    }

    #[test]
    fn counts_follow_two_d_r() {
        let a = init_adapters(&registry(), 4, 4.0, 0).unwrap();
        assert_eq!(a.num_trainable(), 512);
        assert!(a.adapters["l"].b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_one_hand_example() {
        let m = Tensor::new(vec![3, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0]);
        let u = [1.0, 2.0, 3.0];
        let v = [0.5, -1.0, 2.0];
        let ad = LoraAdapter {
            target: "t".into(),
            a: Tensor::new(vec![3, 1], u.to_vec()),
            b: Tensor::new(vec![1, 3], v.to_vec()),
            rank: 1,
            alpha: 1.0,
        };
        let x = [1.0, 1.0, 1.0];
        let y = adapted_forward(&m, &ad, &x).unwrap();
        // M x = (3, 1, 0); v.x = 1.5
        let want = [3.0 + 1.5, 1.0 + 3.0, 0.0 + 4.5];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(adapted_forward(&m, &ad, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut a = init_adapters(&registry(), 4, 8.0, 3).unwrap();
        a.adapters.get_mut("l").unwrap().b = Tensor::full(&[4, 64], 0.25);
        let back = AdapterSet::from_checkpoint(&Checkpoint::from_bytes(&a.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.rank, 4);
        assert_eq!(back.alpha, 8.0);
        assert_eq!(back.adapters["l"].b, a.adapters["l"].b);
    }
}
