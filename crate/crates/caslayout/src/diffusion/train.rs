//! Training loops: per-stage denoiser training, standalone VAE training and
//! the 1:1 co-training of the relation VAE with the box layout stage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Array, Ctx};
use crate::relations::extract_dense;
use crate::scene::{encode_stage, ElementClass, FloorGrid, Scene, Stage, StageVector, FEATURE_DIM, LATENT_DIM};
use crate::sparse::{assign_zones, sparsify, ZoneTable};

use super::schedule::NoiseSchedule;
use super::stage::{stage_losses, StageError, StageModel, StageTruth};
use super::vae::{candidate_set, vae_loss, Candidate, GraphView, VaeError, VaeModel};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Sparse(#[from] crate::sparse::SparseError),
    #[error("empty training set")]
    EmptyData,
}

/// Optimizer settings for one run. `lr_decay` multiplies the learning rate
/// once per epoch (a pass of `steps_per_epoch` updates).
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
}

impl OptimConfig {
    pub fn desk(steps: usize, batch: usize) -> Self {
        OptimConfig { lr: 1e-3, lr_decay: 0.02, weight_decay: 0.0, batch, steps, steps_per_epoch: 256 }
    }
}

/// One training example for a stage run.
#[derive(Debug, Clone)]
pub struct StageItem {
    pub vectors: Vec<StageVector>,
    pub truth: Vec<StageTruth>,
    pub floor: FloorGrid,
}

/// Ground-truth row attributes for a stage, taken from a fully attributed
/// scene. `latents` supplies stage-3 targets and stage-4 conditions.
pub fn stage_truth(scene: &Scene, stage: Stage, latents: Option<&[Vec<f64>]>) -> Vec<StageTruth> {
    let mut out = Vec::new();
    let mut row = 0usize;
    for (_, e) in scene.elements.iter().enumerate() {
        if stage != Stage::Type && e.class == ElementClass::Empty {
            continue;
        }
        let mut oh = vec![0.0; scene.vocab.class_count()];
        oh[e.class.index(&scene.vocab)] = 1.0;
        let arch_box = e.class.is_arch().then(|| {
            let mut b = [0.0; 8];
            b[..3].copy_from_slice(&e.obb.size);
            b[3..6].copy_from_slice(&e.obb.translation);
            b[6] = e.obb.rotation[0];
            b[7] = e.obb.rotation[1];
            b
        });
        out.push(StageTruth {
            class_onehot: oh,
            size: e.obb.size,
            translation: e.obb.translation,
            rotation: e.obb.rotation,
            feature: if e.feature.len() == FEATURE_DIM { e.feature.clone() } else { vec![0.0; FEATURE_DIM] },
            latent: latents.map(|l| l[row].clone()).unwrap_or_else(|| vec![0.0; LATENT_DIM]),
            arch_box,
        });
        row += 1;
    }
    out
}

/// Build a stage training item from a scene. For stages 3 and 4 the VAE
/// provides deterministic target/conditioning latents from the scene's
/// sparse relation graph.
pub fn stage_item(
    scene: &Scene,
    stage: Stage,
    vae: Option<&VaeModel>,
    zone_table: &ZoneTable,
) -> Result<StageItem, TrainError> {
    let latents = match (stage, vae) {
        (Stage::RelationLatent | Stage::BoxLayout, Some(vae)) => {
            let dense = extract_dense(scene);
            let zones = assign_zones(scene, zone_table)?;
            let sparse = sparsify(&dense, &zones)?;
            Some(vae.encode_deterministic(scene, &sparse)?)
        }
        _ => None,
    };
    let vectors = match stage {
        Stage::BoxLayout => encode_stage(scene, stage, latents.as_deref())?,
        _ => encode_stage(scene, stage, None)?,
    };
    let truth = stage_truth(scene, stage, latents.as_deref());
    Ok(StageItem { vectors, truth, floor: scene.floor.clone() })
}

/// Minimize the stage loss over uniformly sampled batches. Returns the
/// per-step total loss curve.
pub fn train_stage(
    model: &mut StageModel,
    items: &[StageItem],
    schedule: &NoiseSchedule,
    opt: &OptimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut curve = Vec::with_capacity(opt.steps);
    let mut lr = opt.lr;
    for step in 0..opt.steps {
        let grads;
        let loss_v;
        {
            let mut ctx = Ctx::new(&model.store);
            let mut total = ctx.tape.constant(Array::scalar(0.0));
            for _ in 0..opt.batch {
                let item = &items[rng.gen_range(0..items.len())];
                let (eps_l, recon_l) =
                    stage_losses(model, &mut ctx, &item.vectors, &item.truth, &item.floor, schedule, None, rng)?;
                let s = ctx.tape.add(eps_l, recon_l)?;
                total = ctx.tape.add(total, s)?;
            }
            total = ctx.tape.scale(total, 1.0 / opt.batch as f64);
            ctx.backward(total)?;
            loss_v = ctx.tape.value(total).data[0];
            grads = ctx.grads();
        }
        model.store.adamw_step(&grads, lr, opt.weight_decay)?;
        curve.push(loss_v);
        if (step + 1) % opt.steps_per_epoch == 0 {
            lr *= 1.0 - opt.lr_decay;
        }
    }
    Ok(curve)
}

/// One prepared VAE example: node/edge view plus supervised candidates.
pub struct VaeItem {
    pub view: GraphView,
    pub candidates: Vec<Candidate>,
}

pub fn vae_item(scene: &Scene, zone_table: &ZoneTable) -> Result<VaeItem, TrainError> {
    let dense = extract_dense(scene);
    let zones = assign_zones(scene, zone_table)?;
    let sparse = sparsify(&dense, &zones)?;
    let view = GraphView::build(scene, &sparse)?;
    let candidates = candidate_set(scene, &zones, &sparse)?;
    Ok(VaeItem { view, candidates })
}

/// Standalone VAE training (cross-entropy + KL only).
pub fn train_vae(
    model: &mut VaeModel,
    items: &[VaeItem],
    opt: &OptimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut curve = Vec::with_capacity(opt.steps);
    let mut lr = opt.lr;
    for step in 0..opt.steps {
        let grads;
        let loss_v;
        {
            let mut ctx = Ctx::new(&model.store);
            let mut total = ctx.tape.constant(Array::scalar(0.0));
            for _ in 0..opt.batch {
                let item = &items[rng.gen_range(0..items.len())];
                let enc = model.encode(&mut ctx, &item.view, Some(rng))?;
                let l = vae_loss(model, &mut ctx, &item.view, &item.candidates, &enc)?;
                total = ctx.tape.add(total, l)?;
            }
            total = ctx.tape.scale(total, 1.0 / opt.batch as f64);
            ctx.backward(total)?;
            loss_v = ctx.tape.value(total).data[0];
            grads = ctx.grads();
        }
        model.store.adamw_step(&grads, lr, opt.weight_decay)?;
        curve.push(loss_v);
        if (step + 1) % opt.steps_per_epoch == 0 {
            lr *= 1.0 - opt.lr_decay;
        }
    }
    Ok(curve)
}

/// One co-training example: the stage-4 item without latents plus the VAE
/// view that produces them.
pub struct CotrainItem {
    pub vectors: Vec<StageVector>,
    pub truth: Vec<StageTruth>,
    pub floor: FloorGrid,
    pub view: GraphView,
    pub candidates: Vec<Candidate>,
}

pub fn cotrain_item(scene: &Scene, zone_table: &ZoneTable) -> Result<CotrainItem, TrainError> {
    let VaeItem { view, candidates } = vae_item(scene, zone_table)?;
    // placeholder latents; the live VAE output replaces them in the pass
    let zeros = vec![vec![0.0; LATENT_DIM]; view.ids.len()];
    let vectors = encode_stage(scene, Stage::BoxLayout, Some(&zeros))?;
    let truth = stage_truth(scene, Stage::BoxLayout, None);
    Ok(CotrainItem { vectors, truth, floor: scene.floor.clone(), view, candidates })
}

#[derive(Debug, Clone, Copy)]
pub struct CotrainStats {
    pub total: f64,
    pub vae: f64,
    pub diffusion: f64,
}

/// One joint update: `total = vae_loss + (eps_loss + recon_loss)` with
/// gradients flowing through the reparameterized latents into the VAE
/// encoder. `freeze_vae` detaches the latents and skips the VAE update,
/// which reproduces the no-co-training configuration.
pub fn cotrain_step(
    vae: &mut VaeModel,
    stage4: &mut StageModel,
    items: &[&CotrainItem],
    schedule: &NoiseSchedule,
    lr: f64,
    weight_decay: f64,
    freeze_vae: bool,
    rng: &mut ChaCha8Rng,
) -> Result<CotrainStats, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let grads;
    let mut vae_acc = 0.0;
    let mut diff_acc = 0.0;
    let total_v;
    {
        let mut ctx = Ctx::with_stores(&[&vae.store, &stage4.store]);
        let mut total = ctx.tape.constant(Array::scalar(0.0));
        for item in items {
            let enc = vae.encode(&mut ctx, &item.view, Some(rng))?;
            let z = if freeze_vae {
                let detached = ctx.tape.value(enc.z).clone();
                ctx.tape.constant(detached)
            } else {
                enc.z
            };
            let (eps_l, recon_l) =
                stage_losses(stage4, &mut ctx, &item.vectors, &item.truth, &item.floor, schedule, Some(z), rng)?;
            let diff = ctx.tape.add(eps_l, recon_l)?;
            diff_acc += ctx.tape.value(diff).data[0];
            let contribution = if freeze_vae {
                diff
            } else {
                let v = vae_loss(vae, &mut ctx, &item.view, &item.candidates, &enc)?;
                vae_acc += ctx.tape.value(v).data[0];
                ctx.tape.add(v, diff)?
            };
            total = ctx.tape.add(total, contribution)?;
        }
        total = ctx.tape.scale(total, 1.0 / items.len() as f64);
        ctx.backward(total)?;
        total_v = ctx.tape.value(total).data[0];
        grads = ctx.grads();
    }
    if !freeze_vae {
        vae.store.adamw_step(&grads, lr, weight_decay)?;
    }
    stage4.store.adamw_step(&grads, lr, weight_decay)?;
    Ok(CotrainStats {
        total: total_v,
        vae: vae_acc / items.len() as f64,
        diffusion: diff_acc / items.len() as f64,
    })
}

/// Full co-training loop over uniformly sampled batches.
pub fn cotrain(
    vae: &mut VaeModel,
    stage4: &mut StageModel,
    items: &[CotrainItem],
    schedule: &NoiseSchedule,
    opt: &OptimConfig,
    freeze_vae: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CotrainStats>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut curve = Vec::with_capacity(opt.steps);
    let mut lr = opt.lr;
    for step in 0..opt.steps {
        let batch: Vec<&CotrainItem> = (0..opt.batch).map(|_| &items[rng.gen_range(0..items.len())]).collect();
        let stats = cotrain_step(vae, stage4, &batch, schedule, lr, opt.weight_decay, freeze_vae, rng)?;
        curve.push(stats);
        if (step + 1) % opt.steps_per_epoch == 0 {
            lr *= 1.0 - opt.lr_decay;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::stage::StageConfig;
    use crate::diffusion::vae::VaeConfig;
    use crate::scene::{SceneElement, Vocabulary};
    use rand::SeedableRng;

    fn tiny_scene() -> Scene {
        let v = Vocabulary::living_room();
        let table = SceneElement::placed(
            "table",
            ElementClass::Furniture(v.index_of("dining_table").unwrap()),
            [1.4, 0.8, 0.75],
            [0.3, -0.2, 0.375],
            15.0,
        );
        let chair = SceneElement::placed(
            "chair",
            ElementClass::Furniture(v.index_of("dining_chair").unwrap()),
            [0.45, 0.45, 0.9],
            [0.3, 0.5, 0.45],
            195.0,
        );
        Scene::assemble(4, v, vec![table, chair], Vec::new(), 16, 0.5).unwrap()
    }

    #[test]
    fn overfit_trend_on_fixed_tiny_batch() {
        let scene = tiny_scene();
        let cfg = StageConfig {
            stage: Stage::BoxLayout,
            class_count: scene.vocab.class_count(),
            n_max: 4,
            width: 32,
            heads: 2,
            blocks: 1,
            grid: 16,
            patch: 8,
            use_floor: false,
        };
        let mut model = StageModel::new(cfg, 3);
        let schedule = NoiseSchedule::linear(10).unwrap();
        let table = ZoneTable::living_room();
        let vae = VaeModel::new(VaeConfig { width: 32, heads: 2, enc_blocks: 1, dec_blocks: 1, class_count: scene.vocab.class_count(), n_max: 4, mode: crate::diffusion::vae::VaeAttentionMode::InOut }, 5);
        let item = stage_item(&scene, Stage::BoxLayout, Some(&vae), &table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opt = OptimConfig { lr: 2e-3, lr_decay: 0.0, weight_decay: 0.0, batch: 4, steps: 200, steps_per_epoch: 1000 };
        let curve = train_stage(&mut model, &[item], &schedule, &opt, &mut rng).unwrap();
        let head: f64 = curve[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = curve[curve.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not trend down: {head} -> {tail}");
    }

    #[test]
    fn cotrain_total_is_sum_of_parts_and_freezing_works() {
        let scene = tiny_scene();
        let table = ZoneTable::living_room();
        let item = cotrain_item(&scene, &table).unwrap();
        let schedule = NoiseSchedule::linear(10).unwrap();
        let class_count = scene.vocab.class_count();
        let mk = || {
            let vae = VaeModel::new(VaeConfig { width: 32, heads: 2, enc_blocks: 1, dec_blocks: 1, class_count, n_max: 4, mode: crate::diffusion::vae::VaeAttentionMode::InOut }, 7);
            let s4 = StageModel::new(
                StageConfig { stage: Stage::BoxLayout, class_count, n_max: 4, width: 32, heads: 2, blocks: 1, grid: 16, patch: 8, use_floor: false },
                9,
            );
            (vae, s4)
        };
        let (mut vae, mut s4) = mk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats = cotrain_step(&mut vae, &mut s4, &[&item], &schedule, 1e-3, 0.0, false, &mut rng).unwrap();
        assert!((stats.total - (stats.vae + stats.diffusion)).abs() < 1e-9);

        // freezing leaves the VAE parameters bit-identical
        let (mut vae_f, mut s4_f) = mk();
        let before: Vec<f64> = vae_f.store.names().map(|n| vae_f.store.get(n).unwrap().data[0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        cotrain_step(&mut vae_f, &mut s4_f, &[&item], &schedule, 1e-3, 0.0, true, &mut rng).unwrap();
        let after: Vec<f64> = vae_f.store.names().map(|n| vae_f.store.get(n).unwrap().data[0]).collect();
        assert_eq!(before, after);
    }
}
