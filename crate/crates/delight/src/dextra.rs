//! DExTra: the deep expand-reduce transformation.
//!
//! A stack of `N` group linear layers first widens a `d_m`-dimensional
//! input to `d_max = round(m_w * d_m)` over the first `ceil(N/2)` layers,
//! then narrows it to `d_o`. Group counts double per layer up to `g_max`
//! and mirror back down, so early (wide-group) layers stay cheap. Feature
//! shuffling and an input mixer connection recombine groups between
//! layers; layers adjacent to a dense (`g = 1`) layer skip both and use
//! plain concatenation, since a dense layer already sees every feature.

use crate::error::{Error, Result};
use crate::glt::GroupLinear;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, TensorId};
use rand::Rng;

/// Maximum group count so that every group keeps at least 32 features.
pub fn default_g_max(d_m: usize) -> usize {
    d_m.div_ceil(32).max(1)
}

#[derive(Clone, Debug)]
pub struct DextraConfig {
    /// Input width.
    pub d_m: usize,
    /// Output width.
    pub d_o: usize,
    /// Number of group linear layers, at least 2.
    pub depth: usize,
    /// Width multiplier; the expansion peaks at `round(m_w * d_m)`.
    pub width_mult: f64,
    /// Group count cap.
    pub g_max: usize,
    /// Apply feature shuffling between grouped layers.
    pub shuffle: bool,
}

impl DextraConfig {
    pub fn new(d_m: usize, d_o: usize, depth: usize, width_mult: f64) -> Self {
        Self {
            d_m,
            d_o,
            depth,
            width_mult,
            g_max: default_g_max(d_m),
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.d_o == 0 {
            return Err(Error::config(format!(
                "widths must be positive, got d_m={} d_o={}",
                self.d_m, self.d_o
            )));
        }
        if !self.width_mult.is_finite() || self.width_mult < 1.0 {
            return Err(Error::config(format!(
                "width multiplier must be at least 1, got {}",
                self.width_mult
            )));
        }
        if self.g_max == 0 {
            return Err(Error::config("g_max must be at least 1"));
        }
        Ok(())
    }
}

/// Resolved shape of one layer in the stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    /// 1-based layer index.
    pub index: usize,
    /// Input width after mixing.
    pub in_dim: usize,
    /// Output width.
    pub out_dim: usize,
    /// Group count.
    pub groups: usize,
    /// Whether this layer's input passes through the mixer (false for
    /// the first layer).
    pub mixer: bool,
}

/// Per-layer group counts: `g^l = min(2^(l-1), g_max)` through the
/// midpoint, mirrored afterwards (`g^l = g^(N-l+1)`).
pub fn group_schedule(depth: usize, g_max: usize) -> Result<Vec<usize>> {
    if depth < 2 {
        return Err(Error::config(format!(
            "DExTra depth must be at least 2, got {depth}"
        )));
    }
    if g_max == 0 {
        return Err(Error::config("g_max must be at least 1"));
    }
    let half = depth.div_ceil(2);
    let mut schedule = Vec::with_capacity(depth);
    for l in 1..=depth {
        if l <= half {
            let pow = 1usize.checked_shl((l - 1) as u32).unwrap_or(usize::MAX);
            schedule.push(pow.min(g_max));
        } else {
            schedule.push(schedule[depth - l]);
        }
    }
    Ok(schedule)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Resolve layer widths. Targets interpolate linearly from `d_m` up to
/// `d_max` across the expansion half, then down to `d_o`; intermediate
/// widths snap to the nearest multiple of `lcm(g^l, g^(l+1))` (ties up)
/// so both the producing and consuming group splits stay valid, and the
/// last layer is forced to exactly `d_o`. Layer `l > 1` takes
/// `d_m + out_dim(l-1)` inputs because the mixer prepends the shuffled
/// previous output to the block input.
pub fn width_schedule(cfg: &DextraConfig, groups: &[usize]) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let n = groups.len();
    if n < 2 {
        return Err(Error::config("width schedule needs at least 2 layers"));
    }
    for &g in groups {
        if cfg.d_m % g != 0 {
            return Err(Error::config(format!(
                "d_m {} is not divisible by group count {g} in the schedule {groups:?}",
                cfg.d_m
            )));
        }
    }
    let half = n.div_ceil(2);
    let d_max = (cfg.width_mult * cfg.d_m as f64).round() as usize;
    let mut specs: Vec<LayerSpec> = Vec::with_capacity(n);
    for l in 1..=n {
        let target = if l <= half {
            cfg.d_m as f64 + (d_max as f64 - cfg.d_m as f64) * l as f64 / half as f64
        } else {
            d_max as f64 - (d_max as f64 - cfg.d_o as f64) * (l - half) as f64 / (n - half) as f64
        };
        let out_dim = if l == n {
            cfg.d_o
        } else {
            let unit = lcm(groups[l - 1], groups[l]);
            let snapped = (target / unit as f64).round() as usize * unit;
            snapped.max(unit)
        };
        let in_dim = if l == 1 {
            cfg.d_m
        } else {
            cfg.d_m + specs[l - 2].out_dim
        };
        specs.push(LayerSpec {
            index: l,
            in_dim,
            out_dim,
            groups: groups[l - 1],
            mixer: l > 1,
        });
    }
    Ok(specs)
}

/// Channel-shuffle permutation: the transpose of the `g x (d/g)` view,
/// so position `j` takes its value from `(j mod g) * d/g + j div g`.
pub fn shuffle_perm(d: usize, g: usize) -> Result<Vec<usize>> {
    if g == 0 || d % g != 0 {
        return Err(Error::invalid(format!(
            "cannot shuffle {d} features in {g} groups"
        )));
    }
    Ok((0..d).map(|j| (j % g) * (d / g) + j / g).collect())
}

/// Group-wise input mixer: chunk `y` and `x` into `g` groups each and
/// interleave them, y-chunk before x-chunk within every group. With
/// `g = 1` this is the plain concatenation `[y, x]`.
pub fn input_mixer(tape: &mut Tape, x: TensorId, y: TensorId, g: usize) -> Result<TensorId> {
    let xsh = tape.shape(x).to_vec();
    let ysh = tape.shape(y).to_vec();
    if xsh.len() != ysh.len() || xsh.is_empty() || xsh[..xsh.len() - 1] != ysh[..ysh.len() - 1] {
        return Err(Error::ShapeMismatch {
            op: "input_mixer",
            lhs: xsh,
            rhs: ysh,
        });
    }
    let axis = xsh.len() - 1;
    if g == 1 {
        return tape.concat(axis, &[y, x]);
    }
    let (dx, dy) = (xsh[axis], ysh[axis]);
    if dx % g != 0 || dy % g != 0 {
        return Err(Error::invalid(format!(
            "mixer group count {g} must divide both widths {dy} and {dx}"
        )));
    }
    let ychunks = tape.split(y, axis, &vec![dy / g; g])?;
    let xchunks = tape.split(x, axis, &vec![dx / g; g])?;
    let mut interleaved = Vec::with_capacity(2 * g);
    for (yc, xc) in ychunks.into_iter().zip(xchunks) {
        interleaved.push(yc);
        interleaved.push(xc);
    }
    tape.concat(axis, &interleaved)
}

/// The executable expand-reduce stack.
pub struct Dextra {
    shuffle: bool,
    plan: Vec<LayerSpec>,
    layers: Vec<GroupLinear>,
}

impl Dextra {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &DextraConfig,
    ) -> Result<Self> {
        let groups = group_schedule(cfg.depth, cfg.g_max)?;
        let plan = width_schedule(cfg, &groups)?;
        let layers = plan
            .iter()
            .map(|s| {
                GroupLinear::new(
                    store,
                    rng,
                    &format!("{name}.l{}", s.index),
                    s.in_dim,
                    s.out_dim,
                    s.groups,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shuffle: cfg.shuffle,
            plan,
            layers,
        })
    }

    pub fn plan(&self) -> &[LayerSpec] {
        &self.plan
    }

    pub fn d_m(&self) -> usize {
        self.plan[0].in_dim
    }

    pub fn d_o(&self) -> usize {
        self.plan[self.plan.len() - 1].out_dim
    }

    /// Run the stack on `[..., d_m]` input, producing `[..., d_o]`.
    /// GELU follows every layer except the last.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 {
                x
            } else {
                let g_prev = self.plan[i - 1].groups;
                let g_cur = self.plan[i].groups;
                if g_prev == 1 || g_cur == 1 {
                    input_mixer(tape, x, y, 1)?
                } else {
                    let shuffled = if self.shuffle {
                        let d = *tape.shape(y).last().unwrap();
                        tape.permute_features(y, &shuffle_perm(d, g_prev)?)?
                    } else {
                        y
                    };
                    input_mixer(tape, x, shuffled, g_cur)?
                }
            };
            y = layer.forward(tape, bound, input)?;
            if i + 1 < self.layers.len() {
                y = tape.gelu(y)?;
            }
        }
        Ok(y)
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(GroupLinear::param_count).sum()
    }

    pub fn macs_per_token(&self) -> u64 {
        self.layers.iter().map(GroupLinear::macs_per_token).sum()
    }
}
