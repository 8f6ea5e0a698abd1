//! Headless MS-TCN++ prediction-generation stage: a 1x1 input projection followed by
//! dual-dilated residual layers. Output keeps the input's frame count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frame::NUM_CHANNELS;
use crate::params::{ParamId, ParamInit, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub use_dual_dilation: bool,
    /// Extra single-dilation residual stacks after the main stage (0 = none).
    pub refinement_stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: NUM_CHANNELS,
            hidden_dim: 64,
            num_layers: 10,
            kernel_size: 3,
            dropout: 0.3,
            use_dual_dilation: true,
            refinement_stages: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "backbone dims and layer count must be at least 1".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "backbone kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Dilations used by main-stage layer `l`.
    pub fn dilations(&self, l: usize) -> (usize, Option<usize>) {
        let up = 1usize << l;
        if self.use_dual_dilation {
            (up, Some(1usize << (self.num_layers - 1 - l)))
        } else {
            (up, None)
        }
    }
}

/// Number of input frames that can influence one output frame.
pub fn receptive_field(cfg: &BackboneConfig) -> usize {
    let k1 = cfg.kernel_size - 1;
    let main: usize = (0..cfg.num_layers)
        .map(|l| {
            let (a, b) = cfg.dilations(l);
            k1 * a.max(b.unwrap_or(0))
        })
        .sum();
    let refine: usize = (0..cfg.num_layers).map(|l| k1 * (1usize << l)).sum();
    main + cfg.refinement_stages * refine + 1
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn register(
        store: &mut ParamStore,
        init: &mut dyn ParamInit,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Result<Self> {
        let w = init.tensor(&format!("{name}.w"), &[c_out, c_in, k], Some(c_in * k))?;
        let b = init.tensor(&format!("{name}.b"), &[c_out], None)?;
        Ok(Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), b),
        })
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var, dilation: usize) -> Result<Var> {
        tape.conv1d(x, vars[self.w.index()], Some(vars[self.b.index()]), dilation)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    conv_a: Conv,
    conv_b: Option<Conv>,
    fuse: Conv,
    dilation_a: usize,
    dilation_b: Option<usize>,
}

#[derive(Debug, Clone)]
struct Stage {
    input: Conv,
    layers: Vec<Layer>,
}

/// Registered backbone parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn register(store: &mut ParamStore, init: &mut dyn ParamInit, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.hidden_dim;
        let k = cfg.kernel_size;
        let mut stages = Vec::new();
        for s in 0..=cfg.refinement_stages {
            let prefix = if s == 0 {
                "backbone".to_string()
            } else {
                format!("backbone.refine{s}")
            };
            let in_dim = if s == 0 { cfg.input_dim } else { f };
            let input = Conv::register(store, init, &format!("{prefix}.input"), f, in_dim, 1)?;
            let mut layers = Vec::with_capacity(cfg.num_layers);
            for l in 0..cfg.num_layers {
                let name = format!("{prefix}.layer{l}");
                let (da, db) = if s == 0 {
                    cfg.dilations(l)
                } else {
                    (1usize << l, None)
                };
                let conv_a = Conv::register(store, init, &format!("{name}.conv_a"), f, f, k)?;
                let conv_b = match db {
                    Some(_) => Some(Conv::register(store, init, &format!("{name}.conv_b"), f, f, k)?),
                    None => None,
                };
                let fuse_in = if db.is_some() { 2 * f } else { f };
                let fuse = Conv::register(store, init, &format!("{name}.fuse"), f, fuse_in, 1)?;
                layers.push(Layer {
                    conv_a,
                    conv_b,
                    fuse,
                    dilation_a: da,
                    dilation_b: db,
                });
            }
            stages.push(Stage { input, layers });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `x` is `[input_dim, T]`; returns `[hidden_dim, T]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (rows, t) = tape.value(x).dims2();
        if rows != self.cfg.input_dim {
            return Err(Error::shape(
                "backbone",
                format!("input has {rows} channels, expected {}", self.cfg.input_dim),
            ));
        }
        if t == 0 {
            return Err(Error::shape("backbone", "input has no frames"));
        }
        let p = self.cfg.dropout;
        let mut h = x;
        for stage in &self.stages {
            h = stage.input.apply(tape, vars, h, 1)?;
            for layer in &stage.layers {
                let a = layer.conv_a.apply(tape, vars, h, layer.dilation_a)?;
                let out = match (layer.conv_b, layer.dilation_b) {
                    (Some(conv_b), Some(db)) => {
                        let b = conv_b.apply(tape, vars, h, db)?;
                        let cat = tape.concat(&[a, b])?;
                        let fused = layer.fuse.apply(tape, vars, cat, 1)?;
                        tape.relu(fused)
                    }
                    _ => {
                        let r = tape.relu(a);
                        layer.fuse.apply(tape, vars, r, 1)?
                    }
                };
                let out = tape.dropout(out, p, train, rng)?;
                h = tape.residual_add(h, out)?;
            }
        }
        Ok(h)
    }
}

/// `[F, T]` backbone output.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    pub data: Tensor,
}

impl HiddenSequence {
    pub fn hidden_dim(&self) -> usize {
        self.data.dims2().0
    }

    pub fn frames(&self) -> usize {
        self.data.dims2().1
    }
}

/// Eval-or-train forward of a standalone backbone on a `[input_dim, T]` matrix.
pub fn backbone_forward<R: Rng + ?Sized>(
    x: &Tensor,
    store: &ParamStore,
    backbone: &Backbone,
    train: bool,
    rng: &mut R,
) -> Result<HiddenSequence> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let h = backbone.forward(&mut tape, &vars, xv, train, rng)?;
    Ok(HiddenSequence {
        data: tape.value(h).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{FanInUniform, ZeroInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(layers: usize, dual: bool) -> BackboneConfig {
        BackboneConfig {
            input_dim: 3,
            hidden_dim: 4,
            num_layers: layers,
            kernel_size: 3,
            dropout: 0.0,
            use_dual_dilation: dual,
            refinement_stages: 0,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Tensor {
        Tensor::matrix(c, t, (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn receptive_field_values() {
        let single = BackboneConfig {
            num_layers: 1,
            use_dual_dilation: false,
            ..small(1, false)
        };
        assert_eq!(receptive_field(&single), 3);
        // Layers 0 and 1 both have max dilation 2: 2*2 + 2*2 + 1.
        assert_eq!(receptive_field(&small(2, true)), 9);
        assert_eq!(receptive_field(&small(2, false)), 7);
    }

    #[test]
    fn single_frame_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, &mut FanInUniform(&mut rng), &small(3, true)).unwrap();
        let x = random_input(&mut rng, 3, 1);
        let h = backbone_forward(&x, &store, &bb, false, &mut rng).unwrap();
        assert_eq!((h.hidden_dim(), h.frames()), (4, 1));
    }

    #[test]
    fn zero_params_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, &mut ZeroInit, &small(3, true)).unwrap();
        let x = random_input(&mut rng, 3, 9);
        let h = backbone_forward(&x, &store, &bb, false, &mut rng).unwrap();
        assert!(h.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, &mut ZeroInit, &small(1, true)).unwrap();
        let x = random_input(&mut rng, 5, 4);
        assert!(backbone_forward(&x, &store, &bb, false, &mut rng).is_err());
        assert!(Backbone::register(
            &mut ParamStore::new(),
            &mut ZeroInit,
            &BackboneConfig { kernel_size: 4, ..small(1, true) }
        )
        .is_err());
    }

    /// Nested-loop reference of one dual-dilated layer plus input projection.
    fn reference_single_layer(store: &ParamStore, x: &[Vec<f64>], cfg: &BackboneConfig) -> Vec<Vec<f64>> {
        let t = x[0].len();
        let f = cfg.hidden_dim;
        let p = |i: usize| store.tensors()[i].data();
        let (in_w, in_b) = (p(0), p(1));
        let h: Vec<Vec<f64>> = (0..f)
            .map(|o| (0..t).map(|tt| in_b[o] + (0..x.len()).map(|i| in_w[o * x.len() + i] * x[i][tt]).sum::<f64>()).collect())
            .collect();
        let conv = |w: &[f64], b: &[f64], d: isize| -> Vec<Vec<f64>> {
            (0..f)
                .map(|o| {
                    (0..t as isize)
                        .map(|tt| {
                            let mut s = b[o];
                            for i in 0..f {
                                for j in 0..3isize {
                                    let src = tt + (j - 1) * d;
                                    if (0..t as isize).contains(&src) {
                                        s += w[(o * f + i) * 3 + j as usize] * h[i][src as usize];
                                    }
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let a = conv(p(2), p(3), 1);
        let b = conv(p(4), p(5), 1);
        let (fw, fb) = (p(6), p(7));
        (0..f)
            .map(|o| {
                (0..t)
                    .map(|tt| {
                        let mut s = fb[o];
                        for i in 0..f {
                            s += fw[o * 2 * f + i] * a[i][tt] + fw[o * 2 * f + f + i] * b[i][tt];
                        }
                        h[o][tt] + s.max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_layer_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small(1, true);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, &mut FanInUniform(&mut rng), &cfg).unwrap();
        let x: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let xt = Tensor::matrix(3, 6, x.concat()).unwrap();
        let h = backbone_forward(&xt, &store, &bb, false, &mut rng).unwrap();
        let want = reference_single_layer(&store, &x, &cfg).concat();
        for (a, b) in h.data.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn refinement_stage_extends_field_and_keeps_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BackboneConfig {
            refinement_stages: 1,
            ..small(2, true)
        };
        assert_eq!(receptive_field(&cfg), 9 + 2 + 4);
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, &mut FanInUniform(&mut rng), &cfg).unwrap();
        let x = random_input(&mut rng, 3, 11);
        assert_eq!(backbone_forward(&x, &store, &bb, false, &mut rng).unwrap().frames(), 11);
    }
}
