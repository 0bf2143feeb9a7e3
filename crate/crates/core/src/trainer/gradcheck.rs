use crate::config::ModelConfig;
use crate::data::Molecule;
use crate::error::{bail, Result};
use crate::fusion::{ModalityMask, MolMix};
use crate::nn::Ctx;
use crate::smiles::SmilesVocab;
use crate::tensor::Var;
use crate::tensor::{InitMode, ParamStore};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates probed per tensor; all of them when unset.
    pub max_per_group: Option<usize>,
    /// Perturbs the analytic gradient of this tensor, to show a broken
    /// backward rule is caught.
    pub corrupt: Option<String>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tolerance: 1e-3,
            max_per_group: None,
            corrupt: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub probed: usize,
    /// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)` over the probed coordinates.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub worst: Option<GroupResult>,
    pub tolerance: f64,
    pub passed: bool,
}

const FLOOR: f64 = 1e-6;

/// Compares backward-pass gradients of `loss` against central differences,
/// one group per parameter tensor. A store without parameters passes
/// vacuously.
pub fn gradcheck_fn<F>(store: &ParamStore<f64>, attention: crate::attention::AttentionKind, loss: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        bail!(Config, "finite-difference step must be positive");
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(s, attention);
        let l = loss(&mut ctx)?;
        Ok(ctx.tape.value(l).data()[0])
    };
    let analytic = {
        let mut ctx = Ctx::new(store, attention);
        let l = loss(&mut ctx)?;
        if ctx.tape.value(l).numel() != 1 {
            bail!(Contract, "gradient check needs a scalar loss");
        }
        ctx.tape.backward(l)?;
        ctx.param_grads()
    };
    if let Some(name) = &opts.corrupt {
        if store.id(name).is_none() {
            bail!(Config, "cannot corrupt unknown parameter `{name}`");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut groups = Vec::new();
    for (g, id) in store.ids().enumerate() {
        let name = store.name(id).to_string();
        let n = store.get(id).numel();
        let mut a = analytic[g].clone().unwrap_or_else(|| vec![0.0; n]);
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            for x in &mut a {
                *x = *x * 1.5 + 0.1;
            }
        }
        let coords: Vec<usize> = match opts.max_per_group {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff, mut amax, mut nmax) = (0.0f64, 0.0f64, 0.0f64);
        for &j in &coords {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * opts.h);
            diff = diff.max((a[j] - num).abs());
            amax = amax.max(a[j].abs());
            nmax = nmax.max(num.abs());
        }
        groups.push(GroupResult {
            name,
            probed: coords.len(),
            error: diff / amax.max(nmax).max(FLOOR),
        });
    }
    let worst = groups.iter().max_by(|x, y| x.error.total_cmp(&y.error)).cloned();
    let passed = groups.iter().all(|g| g.error <= opts.tolerance);
    Ok(GradcheckReport {
        groups,
        worst,
        tolerance: opts.tolerance,
        passed,
    })
}

/// Gradient check of the full model: squared error of the prediction for
/// `mol` against its targets, in F64.
pub fn gradcheck_model(config: &ModelConfig, mol: &Molecule, mask: ModalityMask, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let vocab = SmilesVocab::build(&[mol.smiles.as_str()])?;
    let cfg = ModelConfig {
        targets: mol.targets.len().max(1),
        ..config.clone()
    };
    let (store, model) = MolMix::init::<f64>(&cfg, vocab, seed, InitMode::Glorot)?;
    let y = if mol.targets.is_empty() { vec![0.0] } else { mol.targets.clone() };
    gradcheck_fn(
        &store,
        cfg.attention,
        |ctx| {
            let p = model.predict_batch(ctx, &[mol], mask)?;
            ctx.tape.mse_loss(p, &y)
        },
        opts,
    )
}
