//! Name-keyed registry of synthesis methods. The harness and CLI pick
//! methods by string, every method consumes the same three observed arms,
//! and the withheld oracle arm is structurally barred from reaching any of
//! them.

use std::collections::BTreeMap;

use crate::align::{fit_ottml, OttmlConfig};
use crate::baselines::{gensynth, matchsynth, twfe_synth, DEFAULT_FACTORS};
use crate::data::{Dataset, Role};
use crate::error::{Error, Result};
use crate::map::{AlignmentKernelSpec, ModelKind};
use crate::synth::{generate_dataset, SynthConfig};

/// Shared knobs a method may draw on besides the three observed arms.
#[derive(Debug, Clone)]
pub struct MethodContext {
    pub ottml: OttmlConfig,
    pub synth: SynthConfig,
    pub kernel: AlignmentKernelSpec,
    /// Factor count for the factor-model baseline.
    pub gensynth_factors: usize,
    /// Replicate-level seed; methods that initialize randomly fold it into
    /// their own seed so distinct replicates draw distinct starts.
    pub seed: u64,
}

impl Default for MethodContext {
    fn default() -> Self {
        Self {
            ottml: OttmlConfig::default(),
            synth: SynthConfig::default(),
            kernel: AlignmentKernelSpec::default(),
            gensynth_factors: DEFAULT_FACTORS,
            seed: 0,
        }
    }
}

/// A synthesizer of target-site treatment outcomes from the three observed
/// arms: source controls, source treatments, target controls.
pub trait SynthMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn synthesize(
        &self,
        z0: &Dataset,
        z1: &Dataset,
        z0prime: &Dataset,
        ctx: &MethodContext,
    ) -> Result<Dataset>;
}

struct OtSynth {
    kind: ModelKind,
}

impl SynthMethod for OtSynth {
    fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Affine => "otsynth-linear",
            ModelKind::ResidualNet => "otsynth-net",
        }
    }

    fn synthesize(
        &self,
        z0: &Dataset,
        z1: &Dataset,
        z0prime: &Dataset,
        ctx: &MethodContext,
    ) -> Result<Dataset> {
        let mut cfg = ctx.ottml.clone();
        cfg.model = self.kind;
        cfg.seed ^= ctx.seed;
        let fit = fit_ottml(z0, z0prime, &ctx.kernel, &cfg)?;
        generate_dataset(z1, &fit, z0, z0prime, &ctx.synth)
    }
}

struct Twfe;

impl SynthMethod for Twfe {
    fn name(&self) -> &'static str {
        "twfe"
    }

    fn synthesize(
        &self,
        z0: &Dataset,
        z1: &Dataset,
        z0prime: &Dataset,
        _ctx: &MethodContext,
    ) -> Result<Dataset> {
        twfe_synth(z0, z1, z0prime)
    }
}

struct MatchSynth;

impl SynthMethod for MatchSynth {
    fn name(&self) -> &'static str {
        "matchsynth"
    }

    fn synthesize(
        &self,
        z0: &Dataset,
        z1: &Dataset,
        z0prime: &Dataset,
        _ctx: &MethodContext,
    ) -> Result<Dataset> {
        matchsynth(z0, z1, z0prime)
    }
}

struct GenSynth;

impl SynthMethod for GenSynth {
    fn name(&self) -> &'static str {
        "gensynth"
    }

    fn synthesize(
        &self,
        z0: &Dataset,
        z1: &Dataset,
        z0prime: &Dataset,
        ctx: &MethodContext,
    ) -> Result<Dataset> {
        gensynth(z0, z1, z0prime, ctx.gensynth_factors)
    }
}

/// Methods registered by name. Lookup is by exact string; names list in
/// sorted order.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn SynthMethod>>,
}

impl MethodRegistry {
    /// A registry with no methods; extend it with [`register`].
    ///
    /// [`register`]: MethodRegistry::register
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    /// The built-in five-method family.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        for method in [
            Box::new(OtSynth { kind: ModelKind::Affine }) as Box<dyn SynthMethod>,
            Box::new(OtSynth { kind: ModelKind::ResidualNet }),
            Box::new(Twfe),
            Box::new(MatchSynth),
            Box::new(GenSynth),
        ] {
            reg.register(method).expect("built-in names are distinct");
        }
        reg
    }

    /// Adds a method; a second method under an existing name is rejected.
    pub fn register(&mut self, method: Box<dyn SynthMethod>) -> Result<()> {
        let name = method.name();
        if self.methods.contains_key(name) {
            return Err(Error::Config(format!("method {name:?} is already registered")));
        }
        self.methods.insert(name, method);
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn SynthMethod> {
        self.methods
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    /// Looks up a method and runs it on the three observed arms. Any input
    /// carrying the withheld-oracle role is refused before dispatch, and the
    /// output is tagged synthetic.
    pub fn run(
        &self,
        name: &str,
        z0: &Dataset,
        z1: &Dataset,
        z0prime: &Dataset,
        ctx: &MethodContext,
    ) -> Result<Dataset> {
        let method = self.get(name)?;
        for data in [z0, z1, z0prime] {
            if data.role() == Role::TargetTreatmentOracle {
                return Err(Error::OracleLeak {
                    method: name.to_string(),
                    role: data.role().to_string(),
                });
            }
        }
        let out = method.synthesize(z0, z1, z0prime, ctx)?;
        Ok(if out.role() == Role::Synthetic { out } else { out.with_role(Role::Synthetic) })
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn arm(rng: &mut ChaCha8Rng, n: usize, role: Role, shift: f64) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|_| {
                    Observation::new(vec![
                        rng.random_range(-1.0..1.0) + shift,
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0) + 2.0 * shift,
                    ])
                    .unwrap()
                })
                .collect(),
            role,
        )
        .unwrap()
    }

    fn arms() -> (Dataset, Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        (
            arm(&mut rng, 12, Role::SourceControl, 0.0),
            arm(&mut rng, 8, Role::SourceTreatment, 0.5),
            arm(&mut rng, 10, Role::TargetControl, 0.2),
        )
    }

    fn cheap_ctx() -> MethodContext {
        let mut ctx = MethodContext::default();
        ctx.ottml.max_outer = 3;
        ctx.ottml.warmup_outer = 1;
        ctx.ottml.fw_iters_per_outer = 2;
        ctx.ottml.psi_steps_per_outer = 3;
        ctx.synth.refine_steps = 5;
        ctx.synth.multistart = 1;
        ctx
    }

    #[test]
    fn builtin_names_are_the_five_methods() {
        let reg = MethodRegistry::with_builtins();
        assert_eq!(
            reg.names(),
            vec!["gensynth", "matchsynth", "otsynth-linear", "otsynth-net", "twfe"]
        );
        assert!(matches!(reg.get("nope"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn all_builtins_produce_synthetic_datasets() {
        let (z0, z1, z0p) = arms();
        let reg = MethodRegistry::with_builtins();
        let ctx = cheap_ctx();
        for name in reg.names() {
            let out = reg.run(name, &z0, &z1, &z0p, &ctx).unwrap();
            assert_eq!(out.role(), Role::Synthetic, "{name}");
            assert!(!out.is_empty(), "{name}");
            let expect = if name == "twfe" || name == "matchsynth" {
                z0p.len()
            } else {
                z1.len()
            };
            assert_eq!(out.len(), expect, "{name}");
        }
    }

    #[test]
    fn oracle_tagged_inputs_are_refused() {
        let (z0, z1, z0p) = arms();
        let oracle = z1.with_role(Role::TargetTreatmentOracle);
        let reg = MethodRegistry::with_builtins();
        let ctx = cheap_ctx();
        let err = reg.run("twfe", &z0, &oracle, &z0p, &ctx).unwrap_err();
        assert!(matches!(err, Error::OracleLeak { .. }), "{err}");
        let err = reg.run("matchsynth", &oracle, &z1, &z0p, &ctx).unwrap_err();
        assert!(matches!(err, Error::OracleLeak { .. }), "{err}");
    }

    #[test]
    fn runs_are_deterministic_under_a_fixed_context() {
        let (z0, z1, z0p) = arms();
        let reg = MethodRegistry::with_builtins();
        let ctx = cheap_ctx();
        let a = reg.run("otsynth-linear", &z0, &z1, &z0p, &ctx).unwrap();
        let b = reg.run("otsynth-linear", &z0, &z1, &z0p, &ctx).unwrap();
        assert_eq!(a, b);
    }

    struct Echo;

    impl SynthMethod for Echo {
        fn name(&self) -> &'static str {
            "echo"
        }

        fn synthesize(
            &self,
            _z0: &Dataset,
            z1: &Dataset,
            _z0prime: &Dataset,
            _ctx: &MethodContext,
        ) -> Result<Dataset> {
            Ok(z1.clone())
        }
    }

    #[test]
    fn custom_methods_register_and_dispatch() {
        let mut reg = MethodRegistry::with_builtins();
        reg.register(Box::new(Echo)).unwrap();
        assert!(reg.register(Box::new(Echo)).is_err());
        let (z0, z1, z0p) = arms();
        let out = reg.run("echo", &z0, &z1, &z0p, &MethodContext::default()).unwrap();
        // The registry retags whatever the method returned.
        assert_eq!(out.role(), Role::Synthetic);
        assert_eq!(out.len(), z1.len());
    }
}
