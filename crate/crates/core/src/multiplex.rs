//! Weight multiplexing: a keyed parameter registry where every module instance
//! that binds the same key gets the same storage, plus the encoder group plan.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Param;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A registry entry as seen by a module instance.
#[derive(Clone, Debug)]
pub struct ParamHandle<T> {
    key: String,
    param: Param<T>,
}

impl<T> ParamHandle<T> {
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn param(&self) -> &Param<T> {
        &self.param
    }
}

impl<T> Deref for ParamHandle<T> {
    type Target = Param<T>;

    fn deref(&self) -> &Param<T> {
        &self.param
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub key: String,
    pub shape: Vec<usize>,
    pub count: usize,
    /// Number of `get_or_bind` calls that resolved to this entry.
    pub binds: usize,
}

#[derive(Debug)]
struct Entry<T> {
    param: Param<T>,
    binds: usize,
}

/// Keyed parameter store. Keys are hierarchical dot-separated names.
#[derive(Debug)]
pub struct ParamRegistry<T> {
    seed: u64,
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Element> ParamRegistry<T> {
    pub fn new(seed: u64) -> Self {
        ParamRegistry {
            seed,
            entries: BTreeMap::new(),
        }
    }

    /// Creates and initializes `key` on first call; later calls alias it.
    /// Initialization depends only on the registry seed and the key.
    pub fn get_or_bind(&mut self, key: &str, shape: &[usize], init: Init) -> Result<ParamHandle<T>> {
        if let Some(e) = self.entries.get_mut(key) {
            let have = e.param.shape();
            if have != shape {
                return Err(Error::Registry(format!(
                    "key `{key}` already bound with shape {have:?}, requested {shape:?}"
                )));
            }
            e.binds += 1;
            return Ok(ParamHandle {
                key: key.to_string(),
                param: e.param.clone(),
            });
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key));
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
            }
        };
        let param = Param::new(value);
        self.entries.insert(
            key.to_string(),
            Entry {
                param: param.clone(),
                binds: 1,
            },
        );
        Ok(ParamHandle {
            key: key.to_string(),
            param,
        })
    }

    pub fn get(&self, key: &str) -> Option<ParamHandle<T>> {
        self.entries.get(key).map(|e| ParamHandle {
            key: key.to_string(),
            param: e.param.clone(),
        })
    }

    /// Every distinct storage once, in key order.
    pub fn distinct_params(&self) -> Vec<ParamInfo> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let shape = e.param.shape();
                ParamInfo {
                    key: k.clone(),
                    count: shape.iter().product(),
                    shape,
                    binds: e.binds,
                }
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|e| e.param.numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn handles(&self) -> impl Iterator<Item = ParamHandle<T>> + '_ {
        self.entries.iter().map(|(k, e)| ParamHandle {
            key: k.clone(),
            param: e.param.clone(),
        })
    }

    pub fn zero_grads(&self) {
        self.entries.values().for_each(|e| e.param.zero_grad());
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Contiguous assignment of encoder layers to groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    pub layers: usize,
    pub groups: usize,
    /// Reuse layers per group, `layers / groups - 1`.
    pub reuse: usize,
    /// `(group, position_in_group)` per layer; position 0 produces the scores.
    pub assignment: Vec<(usize, usize)>,
}

impl GroupPlan {
    pub fn layers_per_group(&self) -> usize {
        self.reuse + 1
    }
}

pub fn plan_groups(layers: usize, groups: usize) -> Result<GroupPlan> {
    if groups == 0 || groups > layers {
        return Err(Error::contract(format!(
            "group count {groups} must be in 1..={layers}"
        )));
    }
    if layers % groups != 0 {
        return Err(Error::Divisibility { layers, groups });
    }
    let per = layers / groups;
    Ok(GroupPlan {
        layers,
        groups,
        reuse: per - 1,
        assignment: (0..layers).map(|l| (l / per, l % per)).collect(),
    })
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of: {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

/// Layer-norm parameters per module instance, or one set per module type
/// within each encoder group / decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LnSharing {
    PerModule,
    Shared,
}
text_enum!(LnSharing { PerModule => "per_module", Shared => "shared" });

/// FFN weights shared within each group / decoder layer, or one encoder FFN
/// and one decoder FFN for the whole model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FfnScope {
    PerGroup,
    Global,
}
text_enum!(FfnScope { PerGroup => "per_group", Global => "global" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    Simt,
    Baseline,
}
text_enum!(DecoderMode { Simt => "simt", Baseline => "baseline" });

/// Whether the self (Pre-MHA) and cross attention of a Sim-T decoder layer
/// use one weight set or two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderAttnSharing {
    Shared,
    Separate,
}
text_enum!(DecoderAttnSharing { Shared => "shared", Separate => "separate" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SharingMode {
    pub ln: LnSharing,
    pub ffn_scope: FfnScope,
    pub decoder: DecoderMode,
    pub decoder_attn: DecoderAttnSharing,
}

impl SharingMode {
    /// Sim-T I: per-module layer norms, FFN shared within a group.
    pub const SIMT_I: SharingMode = SharingMode {
        ln: LnSharing::PerModule,
        ffn_scope: FfnScope::PerGroup,
        decoder: DecoderMode::Simt,
        decoder_attn: DecoderAttnSharing::Shared,
    };

    /// Sim-T II: shared layer norms and globally shared FFNs.
    pub const SIMT_II: SharingMode = SharingMode {
        ln: LnSharing::Shared,
        ffn_scope: FfnScope::Global,
        decoder: DecoderMode::Simt,
        decoder_attn: DecoderAttnSharing::Shared,
    };
}

impl Default for SharingMode {
    fn default() -> Self {
        Self::SIMT_I
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check_params, Graph};

    #[test]
    fn plan_examples() {
        let p = plan_groups(12, 6).unwrap();
        assert_eq!(p.reuse, 1);
        assert_eq!(p.layers_per_group(), 2);
        assert_eq!(p.assignment[0], (0, 0));
        assert_eq!(p.assignment[1], (0, 1));
        assert_eq!(p.assignment[11], (5, 1));

        let p = plan_groups(12, 12).unwrap();
        assert_eq!(p.reuse, 0);
        assert!(p.assignment.iter().all(|&(_, pos)| pos == 0));

        assert!(matches!(
            plan_groups(12, 5),
            Err(Error::Divisibility { layers: 12, groups: 5 })
        ));
        assert!(plan_groups(4, 0).is_err());
        assert!(plan_groups(4, 5).is_err());
    }

    #[test]
    fn plan_groups_have_equal_size() {
        for l in 1..=24 {
            for g in (1..=l).filter(|g| l % g == 0) {
                let p = plan_groups(l, g).unwrap();
                for grp in 0..g {
                    let members: Vec<_> = p.assignment.iter().filter(|a| a.0 == grp).collect();
                    assert_eq!(members.len(), p.reuse + 1);
                    assert_eq!(members[0].1, 0);
                }
                assert_eq!(p, plan_groups(l, g).unwrap());
            }
        }
    }

    #[test]
    fn binding_twice_aliases() {
        let mut r = ParamRegistry::<f32>::new(1);
        let a = r.get_or_bind("enc.g0.ffn.w1", &[4, 8], Init::Uniform { fan_in: 4 }).unwrap();
        let b = r.get_or_bind("enc.g0.ffn.w1", &[4, 8], Init::Zeros).unwrap();
        assert!(a.ptr_eq(&b));
        assert_eq!(r.total(), 32);
        let info = r.distinct_params();
        assert_eq!(info.len(), 1);
        assert_eq!(info[0].binds, 2);
        assert!(matches!(
            r.get_or_bind("enc.g0.ffn.w1", &[8, 4], Init::Zeros),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn distinct_counts() {
        let mut r = ParamRegistry::<f64>::new(0);
        r.get_or_bind("a", &[2, 2], Init::Zeros).unwrap();
        r.get_or_bind("b", &[3], Init::Ones).unwrap();
        assert_eq!(r.total(), 7);
        for _ in 0..3 {
            r.get_or_bind("b", &[3], Init::Ones).unwrap();
        }
        assert_eq!(r.total(), 7);
        assert_eq!(r.distinct_params().iter().map(|p| p.count).sum::<usize>(), 7);
    }

    #[test]
    fn init_depends_on_key_not_order() {
        let mut r1 = ParamRegistry::<f32>::new(5);
        let mut r2 = ParamRegistry::<f32>::new(5);
        let a1 = r1.get_or_bind("x", &[3], Init::Uniform { fan_in: 3 }).unwrap();
        r2.get_or_bind("y", &[3], Init::Uniform { fan_in: 3 }).unwrap();
        let a2 = r2.get_or_bind("x", &[3], Init::Uniform { fan_in: 3 }).unwrap();
        assert_eq!(a1.value(), a2.value());
        let bound = 1.0 / 3f32.sqrt();
        assert!(a1.value().data().iter().all(|v| v.abs() <= bound));
    }

    /// Two use sites of one weight: the registry gradient must match finite
    /// differences of the composed function, and equal the sum of the
    /// gradients each site produces alone.
    #[test]
    fn alias_gradient_is_sum_of_sites() {
        let mut r = ParamRegistry::<f64>::new(3);
        let w = r.get_or_bind("w", &[3, 3], Init::Uniform { fan_in: 3 }).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[0.3, -0.2, 0.9, -0.5, 0.4, 0.1]).unwrap();
        let site = |g: &Graph<f64>, h: crate::autograd::Var| -> Result<crate::autograd::Var> {
            let wv = g.param(&r.get("w").unwrap());
            let y = g.matmul(h, wv)?;
            Ok(g.relu(y))
        };
        let both = |g: &Graph<f64>| {
            let h = g.constant(x.clone());
            let h1 = site(g, h)?;
            let h2 = site(g, h1)?;
            g.softmax(h2).map(|s| g.sum(g.mul(s, s).unwrap()))
        };
        let rep = grad_check_params(both, &[w.param().clone()], 1e-6, None).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");

        // Untie the sites into two copies and compare the summed gradient.
        w.zero_grad();
        let g = Graph::new();
        g.backward(both(&g).unwrap()).unwrap();
        let tied = w.grad();
        let w1 = Param::new((*w.value()).clone());
        let w2 = Param::new((*w.value()).clone());
        let g = Graph::new();
        let h = g.constant(x.clone());
        let h1 = g.relu(g.matmul(h, g.param(&w1)).unwrap());
        let h2 = g.relu(g.matmul(h1, g.param(&w2)).unwrap());
        let s = g.softmax(h2).unwrap();
        g.backward(g.sum(g.mul(s, s).unwrap())).unwrap();
        let summed: Vec<f64> = w1.grad().data().iter().zip(w2.grad().data()).map(|(a, b)| a + b).collect();
        for (a, b) in tied.data().iter().zip(&summed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sharing_text_round_trip() {
        assert_eq!("per_module".parse::<LnSharing>().unwrap(), LnSharing::PerModule);
        assert_eq!(FfnScope::Global.to_string(), "global");
        assert!("bogus".parse::<DecoderMode>().is_err());
    }
}
