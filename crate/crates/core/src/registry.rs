//! Stage-keyed module registry.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::config::{PipelineConfig, SectionView, Stage};
use crate::decode::DecodeStrategy;
use crate::decoders::{build_decoder, Decoder, DecoderSpec, DECODERS};
use crate::encoders::{build_encoder, Encoder, EncoderSpec, ENCODERS};
use crate::error::{Error, Result};
use crate::interaction::{build_interaction, Interaction, InteractionSpec, INTERACTIONS};
use crate::nn::ParamInit;
use crate::preprocess::Preprocessor;
use crate::tasks::VlpObjectives;
use crate::training::{TrainingStrategy, STRATEGIES};

/// Everything a factory may read or initialize.
pub struct BuildContext<'a, 'p> {
    pub config: &'a PipelineConfig,
    pub init: &'a mut ParamInit<'p>,
    /// Section holding the module's settings.
    pub section: String,
    /// Parameter name prefix.
    pub prefix: String,
    /// Width of the states the module consumes.
    pub width: usize,
}

impl BuildContext<'_, '_> {
    pub fn section(&self) -> SectionView<'_> {
        self.config.section(&self.section)
    }
}

pub enum StageModule {
    Preprocessing(Preprocessor),
    Encoder(Box<dyn Encoder>),
    Interaction(Box<dyn Interaction>),
    Decoder(Box<dyn Decoder>),
    Decode(DecodeStrategy),
    Training(TrainingStrategy),
    Pretraining(VlpObjectives),
}

impl StageModule {
    fn stage(&self) -> Stage {
        match self {
            StageModule::Preprocessing(_) => Stage::Preprocessing,
            StageModule::Encoder(_) => Stage::Encoder,
            StageModule::Interaction(_) => Stage::Interaction,
            StageModule::Decoder(_) => Stage::Decoder,
            StageModule::Decode(_) => Stage::Decode,
            StageModule::Training(_) => Stage::Training,
            StageModule::Pretraining(_) => Stage::Pretraining,
        }
    }
}

impl fmt::Debug for StageModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StageModule({})", self.stage())
    }
}

pub type Factory = Arc<dyn Fn(&mut BuildContext) -> Result<StageModule> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ModuleRegistry {
    entries: BTreeMap<(Stage, String), Factory>,
}

impl fmt::Debug for ModuleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl ModuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, stage: Stage, name: &str, factory: F) -> Result<()>
    where
        F: Fn(&mut BuildContext) -> Result<StageModule> + Send + Sync + 'static,
    {
        let key = (stage, name.to_string());
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateModule {
                stage: stage.to_string(),
                name: name.into(),
            });
        }
        self.entries.insert(key, Arc::new(factory));
        Ok(())
    }

    pub fn lookup(&self, stage: Stage, name: &str) -> Result<&Factory> {
        self.entries.get(&(stage, name.to_string())).ok_or_else(|| Error::UnknownModule {
            stage: stage.to_string(),
            name: name.into(),
            available: self.names(stage).join(", "),
        })
    }

    /// Registered names for `stage`, sorted.
    pub fn names(&self, stage: Stage) -> Vec<&str> {
        self.entries
            .keys()
            .filter(|(s, _)| *s == stage)
            .map(|(_, n)| n.as_str())
            .collect()
    }

    /// Runs the factory and checks it produced a module for `stage`.
    pub fn build(&self, stage: Stage, name: &str, ctx: &mut BuildContext) -> Result<StageModule> {
        let module = (self.lookup(stage, name)?)(ctx)?;
        if module.stage() != stage {
            return Err(Error::Invalid(format!(
                "factory `{name}` registered for {stage} built a {} module",
                module.stage()
            )));
        }
        Ok(module)
    }

    /// Every built-in module.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        let ok = "built-in names are distinct";
        r.register(Stage::Preprocessing, "standard", |ctx| {
            let s = ctx.section();
            Ok(StageModule::Preprocessing(Preprocessor {
                max_len: s.positive("max_len", 16)?,
                min_freq: s.positive("min_freq", 1)?,
            }))
        })
        .expect(ok);
        for name in ENCODERS {
            r.register(Stage::Encoder, name, move |ctx| {
                let spec = EncoderSpec::from_section(&ctx.section())?;
                let enc = build_encoder(name, ctx.init, &ctx.prefix, &ctx.section, &spec)?;
                Ok(StageModule::Encoder(enc))
            })
            .expect(ok);
        }
        for name in INTERACTIONS {
            r.register(Stage::Interaction, name, move |ctx| {
                let spec = InteractionSpec::from_section(&ctx.section(), ctx.width)?;
                Ok(StageModule::Interaction(build_interaction(name, ctx.init, &ctx.prefix, &spec)?))
            })
            .expect(ok);
        }
        for name in DECODERS {
            r.register(Stage::Decoder, name, move |ctx| {
                let spec = DecoderSpec::from_section(&ctx.section())?;
                Ok(StageModule::Decoder(build_decoder(name, ctx.init, &ctx.prefix, &spec)?))
            })
            .expect(ok);
        }
        for name in ["greedy", "beam"] {
            r.register(Stage::Decode, name, move |ctx| {
                Ok(StageModule::Decode(DecodeStrategy::from_section(name, &ctx.section())?))
            })
            .expect(ok);
        }
        for name in STRATEGIES {
            r.register(Stage::Training, name, move |ctx| {
                Ok(StageModule::Training(TrainingStrategy::from_section(name, &ctx.section())?))
            })
            .expect(ok);
        }
        r.register(Stage::Pretraining, "vlp", |ctx| {
            Ok(StageModule::Pretraining(VlpObjectives::from_section(&ctx.section())?))
        })
        .expect(ok);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use xmodal_tensor::ParamStore;

    fn greedy(_: &mut BuildContext) -> Result<StageModule> {
        Ok(StageModule::Training(TrainingStrategy::CrossEntropy))
    }

    fn build(r: &ModuleRegistry, stage: Stage, name: &str) -> Result<StageModule> {
        let cfg = parse_config("[pipeline]\n").unwrap();
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, 1);
        let mut ctx = BuildContext {
            config: &cfg,
            init: &mut init,
            section: stage.to_string(),
            prefix: stage.to_string(),
            width: 8,
        };
        r.build(stage, name, &mut ctx)
    }

    #[test]
    fn register_lookup_and_duplicates() {
        let mut r = ModuleRegistry::new();
        r.register(Stage::Training, "x", greedy).unwrap();
        r.register(Stage::Decoder, "x", greedy).unwrap();
        assert!(r.lookup(Stage::Training, "x").is_ok());
        assert!(r.lookup(Stage::Decoder, "x").is_ok());
        assert!(matches!(
            r.register(Stage::Training, "x", greedy),
            Err(Error::DuplicateModule { .. })
        ));
        assert!(matches!(build(&r, Stage::Training, "x").unwrap(), StageModule::Training(_)));
        // Registered under the wrong stage: the result is rejected.
        assert!(build(&r, Stage::Decoder, "x").is_err());
    }

    #[test]
    fn unknown_names_list_alternatives() {
        let r = ModuleRegistry::with_defaults();
        let msg = build(&r, Stage::Encoder, "rnn").unwrap_err().to_string();
        for name in ENCODERS {
            assert!(msg.contains(name), "{msg}");
        }
        assert_eq!(r.names(Stage::Decode), ["beam", "greedy"]);
    }

    #[test]
    fn registration_order_is_irrelevant() {
        let mut a = ModuleRegistry::new();
        let mut b = ModuleRegistry::new();
        for n in ["p", "q", "r"] {
            a.register(Stage::Decode, n, greedy).unwrap();
        }
        for n in ["r", "p", "q"] {
            b.register(Stage::Decode, n, greedy).unwrap();
        }
        assert_eq!(a.names(Stage::Decode), b.names(Stage::Decode));
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
