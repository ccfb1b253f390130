//! A built pipeline: every stage instantiated from one config and seed.

use xmodal_tensor::{Graph, ParamStore, Tensor, Var};

use crate::config::{PipelineConfig, Stage, Task};
use crate::decode::{DecodeStrategy, StepModel};
use crate::decoders::{adapter, Decoder, DecoderState, LogitsHead};
use crate::encoders::{EmbeddingSpec, Embeddings, Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::interaction::Interaction;
use crate::nn::{Linear, ParamInit};
use crate::preprocess::{Batch, Preprocessor, ShapeWorldOptions, VisualTokens, PAD};
use crate::registry::{BuildContext, ModuleRegistry, StageModule};
use crate::tasks::{TaskHead, VlpObjectives};
use crate::training::{TrainOptions, TrainingStrategy};

pub struct Pipeline {
    pub config: PipelineConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub preprocessor: Preprocessor,
    pub embed: Embeddings,
    pub adapter: Option<Linear>,
    pub encoder: Box<dyn Encoder>,
    /// Sentence encoder for tasks that read text as input.
    pub text_encoder: Option<Box<dyn Encoder>>,
    pub interaction: Box<dyn Interaction>,
    pub decoder: Box<dyn Decoder>,
    pub head: LogitsHead,
    pub task_head: TaskHead,
    pub decode: DecodeStrategy,
    pub training: TrainingStrategy,
    pub train_options: TrainOptions,
    pub pretraining: Option<VlpObjectives>,
}

fn choice<'c>(cfg: &'c PipelineConfig, stage: Stage) -> Result<&'c str> {
    cfg.choice(stage)
        .ok_or_else(|| Error::config("pipeline", stage.as_str(), "no module selected"))
}

/// Instantiates every stage. Identical `(cfg, seed)` give bit-identical
/// parameters.
pub fn build_pipeline(cfg: &PipelineConfig, registry: &ModuleRegistry, seed: u64) -> Result<Pipeline> {
    let task = cfg.task;
    let prep = cfg.section("preprocessing");
    let enc_hidden = cfg.section("encoder").positive("hidden", 32)?;
    let dec_hidden = cfg.section("decoder").positive("hidden", 32)?;
    let use_adapter = cfg.section("decoder").bool("adapter", false)?;
    if enc_hidden != dec_hidden && !(use_adapter && task == Task::Captioning) {
        return Err(Error::DimensionMismatch {
            left: "[encoder] hidden".into(),
            left_dim: enc_hidden,
            right: "[decoder] hidden".into(),
            right_dim: dec_hidden,
        });
    }
    let vocab_size = match prep.get("vocab_size") {
        Some(_) => prep.positive("vocab_size", 0)?,
        None => {
            return Err(Error::config(
                "preprocessing",
                "vocab_size",
                "missing; set it to the vocabulary size",
            ))
        }
    };

    let mut params = ParamStore::new();
    let mut init = ParamInit::new(&mut params, seed);
    let mut ctx = |section: &str, prefix: &str, width: usize, stage: Stage, name: &str| -> Result<StageModule> {
        let mut c = BuildContext {
            config: cfg,
            init: &mut init,
            section: section.to_string(),
            prefix: prefix.to_string(),
            width,
        };
        registry.build(stage, name, &mut c)
    };

    let StageModule::Preprocessing(preprocessor) = ctx("preprocessing", "preprocessing", 0, Stage::Preprocessing, choice(cfg, Stage::Preprocessing)?)? else {
        unreachable!("registry checks the stage")
    };
    let encoder_name = choice(cfg, Stage::Encoder)?;
    let StageModule::Encoder(encoder) = ctx("encoder", "encoder", enc_hidden, Stage::Encoder, encoder_name)? else {
        unreachable!()
    };
    let text_encoder = if task == Task::Captioning {
        None
    } else {
        let section = if cfg.sections.contains_key("text_encoder") { "text_encoder" } else { "encoder" };
        let hidden = cfg.section(section).positive("hidden", 32)?;
        if hidden != dec_hidden {
            return Err(Error::DimensionMismatch {
                left: format!("[{section}] hidden"),
                left_dim: hidden,
                right: "[decoder] hidden".into(),
                right_dim: dec_hidden,
            });
        }
        let name = cfg.section(section).string("name", encoder_name)?;
        let StageModule::Encoder(e) = ctx(section, "text_encoder", hidden, Stage::Encoder, &name)? else {
            unreachable!()
        };
        Some(e)
    };
    let StageModule::Interaction(interaction) = ctx("interaction", "interaction", dec_hidden, Stage::Interaction, choice(cfg, Stage::Interaction)?)? else {
        unreachable!()
    };
    let StageModule::Decoder(decoder) = ctx("decoder", "decoder", dec_hidden, Stage::Decoder, choice(cfg, Stage::Decoder)?)? else {
        unreachable!()
    };
    let StageModule::Decode(decode) = ctx("decode", "decode", dec_hidden, Stage::Decode, choice(cfg, Stage::Decode)?)? else {
        unreachable!()
    };
    let StageModule::Training(training) = ctx("training", "training", dec_hidden, Stage::Training, choice(cfg, Stage::Training)?)? else {
        unreachable!()
    };
    let pretraining = match cfg.choice(Stage::Pretraining) {
        Some(name) if task == Task::Vlp => {
            let StageModule::Pretraining(p) = ctx("vlp", "vlp", dec_hidden, Stage::Pretraining, name)? else {
                unreachable!()
            };
            Some(p)
        }
        Some(_) => {
            return Err(Error::config("pipeline", "pretraining", "pre-training heads need task = vlp"));
        }
        None if task == Task::Vlp => {
            return Err(Error::config("pipeline", "pretraining", "task = vlp needs a pre-training module"));
        }
        None => None,
    };

    let espec = EmbeddingSpec {
        feature_dim: prep.positive("feature_dim", ShapeWorldOptions::default().feature_dim())?,
        visual_dim: enc_hidden,
        word_dim: dec_hidden,
        vocab_size,
        max_regions: prep.positive("max_regions", 16)?,
        max_len: preprocessor.max_len,
        visual_norm: cfg.section("encoder").bool("visual_norm", true)?,
        visual_positions: cfg.section("encoder").bool("visual_positions", true)?,
    };
    let embed = Embeddings::new(&mut init, &espec)?;
    let adapter = if enc_hidden != dec_hidden { Some(adapter(&mut init, enc_hidden, dec_hidden)?) } else { None };
    let dspec = crate::decoders::DecoderSpec::from_section(&cfg.section("decoder"))?;
    let tied = dspec.tie_weights.then(|| embed.word_table().to_string());
    let head = LogitsHead::new(&mut init, "head", dec_hidden, vocab_size, tied.as_deref())?;
    let task_head = TaskHead::new(&mut init, cfg, dec_hidden)?;
    if decode.max_len > preprocessor.max_len {
        return Err(Error::config(
            "decode",
            "max_len",
            format!("{} exceeds [preprocessing] max_len = {}", decode.max_len, preprocessor.max_len),
        ));
    }
    let train_options = TrainOptions::from_section(&cfg.section("training"))?;
    drop(init);
    Ok(Pipeline {
        config: cfg.clone(),
        seed,
        params,
        preprocessor,
        embed,
        adapter,
        encoder,
        text_encoder,
        interaction,
        decoder,
        head,
        task_head,
        decode,
        training,
        train_options,
        pretraining,
    })
}

impl Pipeline {
    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn vocab_size(&self) -> usize {
        self.head.vocab_size
    }

    /// Width shared by the interaction, decoder and text states.
    pub fn width(&self) -> usize {
        self.decoder.hidden()
    }

    /// Embeds, encodes and refines visual tokens. `mask` marks real regions
    /// when features are padded.
    pub fn encode_visual(&self, g: &mut Graph, v: &VisualTokens, mask: Option<&[bool]>) -> Result<EncoderOutput> {
        let n = v.regions();
        let full = vec![true; n];
        let mask = mask.unwrap_or(&full);
        let x = self.embed.embed_visual(g, &v.features)?;
        let mut enc = self.encoder.encode(g, x, mask, &v.edges)?;
        if let Some(a) = &self.adapter {
            let s = a.forward(g, enc.states)?;
            enc = EncoderOutput::new(g, s, enc.mask)?;
        }
        self.interaction.refine(g, enc)
    }

    /// Encodes a token sequence with the sentence encoder.
    pub fn encode_text(&self, g: &mut Graph, ids: &[usize]) -> Result<EncoderOutput> {
        let enc = self
            .text_encoder
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("task {} has no sentence encoder", self.task().as_str())))?;
        let x = self.embed.embed_text(g, ids)?;
        let mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        enc.encode(g, x, &mask, &[])
    }

    /// Teacher-forced `[T x V]` logits; row `t` scores the token after
    /// `inputs[t]`.
    pub fn caption_logits(&self, g: &mut Graph, enc: &EncoderOutput, inputs: &[usize]) -> Result<Var> {
        let words = self.embed.embed_text(g, inputs)?;
        let h = self.decoder.forward(g, words, enc, &*self.interaction)?;
        self.head.project(g, h)
    }

    /// `[B x T x V]` logits for a padded batch.
    pub fn captioning_forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let enc = self.encode_visual(g, &batch.visual[i], Some(&batch.region_mask[i]))?;
            rows.push(self.caption_logits(g, &enc, &batch.text[i].ids)?);
        }
        let all = g.concat(&rows, 0)?;
        Ok(g.reshape(all, &[batch.len(), batch.max_len(), self.vocab_size()])?)
    }

    /// Step model over one image for the decode strategies.
    pub fn stepper<'a>(&'a self, visual: &VisualTokens) -> Result<CaptionStepper<'a>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode_visual(&mut g, visual, None)?;
        Ok(CaptionStepper { pipeline: self, g, enc })
    }

    /// Decodes one caption with `strategy`, returning ids with `<bos>`.
    pub fn generate(&self, visual: &VisualTokens, strategy: &DecodeStrategy) -> Result<Vec<usize>> {
        let mut model = self.stepper(visual)?;
        strategy.run(&mut model)
    }

    /// Parameter values in sorted name order, for exact comparisons.
    pub fn parameter_snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .sorted_names()
            .into_iter()
            .map(|n| (n.to_string(), self.params.get(n).expect("listed").clone()))
            .collect()
    }
}

/// Incremental decoder over one encoded image.
pub struct CaptionStepper<'a> {
    pipeline: &'a Pipeline,
    g: Graph<'a>,
    enc: EncoderOutput,
}

impl StepModel for CaptionStepper<'_> {
    type State = DecoderState;

    fn start(&mut self) -> Result<DecoderState> {
        let p = self.pipeline;
        p.decoder.init_state(&mut self.g, &self.enc, &*p.interaction)
    }

    fn step(&mut self, state: &DecoderState, token: usize) -> Result<(Vec<f64>, DecoderState)> {
        let p = self.pipeline;
        let g = &mut self.g;
        let w = p.embed.embed_token(g, token, state.position())?;
        let (h, next) = p.decoder.step(g, state, w, &self.enc, &*p.interaction)?;
        let logits = p.head.project(g, h)?;
        let lsm = g.log_softmax(logits, 0)?;
        Ok((g.value(lsm).to_vec(), next))
    }
}
