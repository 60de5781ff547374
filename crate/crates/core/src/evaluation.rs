//! Part-fidelity metrics (exact match rate and centroid cosine similarity),
//! the reconstruction and composition protocols, and the λ sweep.

use candle_core::Tensor;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_loss::{collect_attention, AttentionStack};
use crate::backend::{gaussian, ToyLdm};
use crate::error::{input_err, Error, Result};
use crate::generation::{GenerationRequest, Generator, ImageGenerator};
use crate::part_discovery::{
    cosine, tag_image, FeatureExtractor, PartCode, PartComposition, PartHierarchy, PatchStatsExtractor,
};
use crate::token_codec::{PartSpace, PromptSpec};
use crate::trainer::{train, TrainOptions, TrainState, TrainingConfig, TrainingExample};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ABSENT_POLICY: &str =
    "slots absent in the reference are excluded from numerator and denominator; a prediction absent at a compared slot counts as a mismatch with cosine 0";

fn check_slots(pred: &PartComposition, reference: &PartComposition) -> Result<()> {
    if pred.num_slots() != reference.num_slots() {
        return Err(input_err!(
            "compositions have {} and {} slots",
            pred.num_slots(),
            reference.num_slots()
        ));
    }
    Ok(())
}

/// Fraction of the reference's present slots whose code `pred` matches.
pub fn emr(pred: &PartComposition, reference: &PartComposition) -> Result<f64> {
    check_slots(pred, reference)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, r) in pred.codes().iter().zip(reference.codes()) {
        if r.is_present() {
            n += 1;
            hit += usize::from(p == r);
        }
    }
    if n == 0 {
        return Err(input_err!("reference composition has no present slot"));
    }
    Ok(hit as f64 / n as f64)
}

fn code_cosine(p: &PartCode, r: &PartCode, h: &PartHierarchy) -> Result<f64> {
    let rv = r.variant.expect("compared slots are present in the reference");
    let rc = h.centroid(r.slot, rv)?;
    match p.variant {
        Some(pv) => Ok(cosine(h.centroid(p.slot, pv)?, rc)),
        None => Ok(0.0),
    }
}

/// Mean centroid cosine over the reference's present slots.
pub fn cosim(pred: &PartComposition, reference: &PartComposition, hierarchy: &PartHierarchy) -> Result<f64> {
    check_slots(pred, reference)?;
    pred.validate(hierarchy.num_parts, hierarchy.num_variants)?;
    reference.validate(hierarchy.num_parts, hierarchy.num_variants)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, r) in pred.codes().iter().zip(reference.codes()) {
        if r.is_present() {
            sum += code_cosine(p, r, hierarchy)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(input_err!("reference composition has no present slot"));
    }
    Ok(sum / n as f64)
}

/// Tags generated images with the same hierarchy and extractor used for
/// training.
pub struct Retagger {
    hierarchy: PartHierarchy,
    extractor: Box<dyn FeatureExtractor>,
}

impl Retagger {
    pub fn new(hierarchy: PartHierarchy) -> Result<Self> {
        let extractor = PatchStatsExtractor::from_descriptor(&hierarchy.extractor)?;
        Self::with_extractor(hierarchy, Box::new(extractor))
    }

    pub fn with_extractor(hierarchy: PartHierarchy, extractor: Box<dyn FeatureExtractor>) -> Result<Self> {
        hierarchy.validate()?;
        if extractor.descriptor() != hierarchy.extractor {
            return Err(Error::Config(format!(
                "re-tagging extractor {:?} differs from the hierarchy's {:?}",
                extractor.descriptor(),
                hierarchy.extractor
            )));
        }
        Ok(Retagger { hierarchy, extractor })
    }

    pub fn hierarchy(&self) -> &PartHierarchy {
        &self.hierarchy
    }

    pub fn tag(&self, image: &RgbImage) -> Result<PartComposition> {
        let g = self.hierarchy.extractor.grid_side();
        Ok(tag_image(image, self.extractor.as_ref(), &self.hierarchy, (g, g))?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Reconstruction,
    Composition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_samples: 500,
            seed: 0,
            steps: crate::generation::DEFAULT_STEPS,
            guidance: crate::generation::DEFAULT_GUIDANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotBreakdown {
    pub slot: usize,
    pub compared: usize,
    pub matches: usize,
    pub emr: Option<f64>,
    pub cosim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub requested: PartComposition,
    pub retagged: PartComposition,
    pub emr: f64,
    pub cosim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub n_samples: usize,
    /// Number of source images mixed per sample (composition protocol).
    pub n_composited_parts: Option<usize>,
    pub emr: f64,
    pub cosim: f64,
    pub per_slot: Vec<SlotBreakdown>,
    pub absent_policy: String,
    pub settings: EvalSettings,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic stream of corpus indices: shuffled, consumed without
/// replacement, reshuffled only once the pool is exhausted.
struct Pool {
    order: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

impl Pool {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut p = Pool {
            order: (0..n).collect(),
            next: n,
            rng,
        };
        p.refill();
        p
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.next = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        if self.next + k > self.order.len() {
            self.refill();
        }
        let out = self.order[self.next..self.next + k].to_vec();
        self.next += k;
        out
    }
}

/// Mixes donors into `base` one slot each; slots are popped from
/// `0..=M` at uniformly random positions so none is replaced twice.
/// Returns the mixed composition and the slots chosen, in order.
pub fn mix_parts(
    base: &PartComposition,
    donors: &[&PartComposition],
    rng: &mut impl Rng,
) -> Result<(PartComposition, Vec<usize>)> {
    if donors.len() > base.num_slots() {
        return Err(input_err!(
            "{} donors but only {} slots to swap",
            donors.len(),
            base.num_slots()
        ));
    }
    let mut idxs: Vec<usize> = (0..base.num_slots()).collect();
    let mut out = base.clone();
    let mut chosen = Vec::with_capacity(donors.len());
    for d in donors {
        check_slots(base, d)?;
        let slot = idxs.remove(rng.gen_range(0..idxs.len()));
        out.set(slot, d.codes()[slot].variant);
        chosen.push(slot);
    }
    Ok((out, chosen))
}

/// Input compositions of the composition protocol: every sample draws
/// `parts_mixed` distinct corpus entries (base first, then donors), and
/// sample sets do not overlap until the corpus is used up.
pub fn composition_inputs(
    corpus: &[PartComposition],
    n: usize,
    parts_mixed: usize,
    seed: u64,
) -> Result<Vec<PartComposition>> {
    if corpus.is_empty() || n == 0 {
        return Err(input_err!("need a non-empty corpus and at least one sample"));
    }
    if parts_mixed == 0 || parts_mixed > corpus.len() {
        return Err(input_err!(
            "parts_mixed must be in 1..={} (got {parts_mixed})",
            corpus.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Pool::new(corpus.len(), ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    (0..n)
        .map(|_| {
            let set = pool.take(parts_mixed);
            let donors: Vec<&PartComposition> = set[1..].iter().map(|&i| &corpus[i]).collect();
            Ok(mix_parts(&corpus[set[0]], &donors, &mut rng)?.0)
        })
        .collect()
}

/// Generates every input, re-tags the outputs and aggregates the scores.
pub fn score_generations(
    inputs: &[PartComposition],
    generator: &dyn ImageGenerator,
    retagger: &Retagger,
    settings: &EvalSettings,
    protocol: Protocol,
    parts_mixed: Option<usize>,
) -> Result<EvalReport> {
    let h = retagger.hierarchy();
    let requests: Vec<GenerationRequest> = inputs
        .iter()
        .enumerate()
        .map(|(i, c)| GenerationRequest {
            composition: c.clone(),
            style_suffix: None,
            seed: settings.seed.wrapping_add(i as u64),
            steps: settings.steps,
            guidance: settings.guidance,
        })
        .collect();
    let images = generator.generate_batch(&requests)?;
    let slots = h.num_parts + 1;
    let mut per = vec![(0usize, 0usize, 0.0f64); slots];
    let mut samples = Vec::with_capacity(inputs.len());
    let mut skipped = 0;
    for (req, img) in inputs.iter().zip(images) {
        let retagged = retagger.tag(&img.image)?;
        if !req.codes().iter().any(PartCode::is_present) {
            skipped += 1;
            continue;
        }
        for (p, r) in retagged.codes().iter().zip(req.codes()) {
            if r.is_present() {
                let e = &mut per[r.slot];
                e.0 += 1;
                e.1 += usize::from(p == r);
                e.2 += code_cosine(p, r, h)?;
            }
        }
        samples.push(SampleScore {
            emr: emr(&retagged, req)?,
            cosim: cosim(&retagged, req, h)?,
            requested: req.clone(),
            retagged,
        });
    }
    if samples.is_empty() {
        return Err(input_err!("no sample had a present slot to score"));
    }
    if skipped > 0 {
        log::warn!("{skipped} samples had no present slot and were skipped");
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol,
        n_samples: samples.len(),
        n_composited_parts: parts_mixed,
        emr: samples.iter().map(|s| s.emr).sum::<f64>() / n,
        cosim: samples.iter().map(|s| s.cosim).sum::<f64>() / n,
        per_slot: per
            .into_iter()
            .enumerate()
            .map(|(slot, (c, m, cs))| SlotBreakdown {
                slot,
                compared: c,
                matches: m,
                emr: (c > 0).then(|| m as f64 / c as f64),
                cosim: (c > 0).then(|| cs / c as f64),
            })
            .collect(),
        absent_policy: ABSENT_POLICY.into(),
        settings: settings.clone(),
        samples,
    })
}

/// Regenerates sampled corpus compositions and scores the re-tagged outputs.
pub fn eval_reconstruction(
    corpus: &[PartComposition],
    generator: &dyn ImageGenerator,
    retagger: &Retagger,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let inputs = composition_inputs(corpus, settings.n_samples, 1, settings.seed)?;
    score_generations(&inputs, generator, retagger, settings, Protocol::Reconstruction, None)
}

/// Mixes `parts_mixed` source compositions per sample, generates, re-tags
/// and scores against the mixed input.
pub fn eval_composition(
    corpus: &[PartComposition],
    generator: &dyn ImageGenerator,
    retagger: &Retagger,
    settings: &EvalSettings,
    parts_mixed: usize,
) -> Result<EvalReport> {
    let inputs = composition_inputs(corpus, settings.n_samples, parts_mixed, settings.seed)?;
    score_generations(
        &inputs,
        generator,
        retagger,
        settings,
        Protocol::Composition,
        Some(parts_mixed),
    )
}

/// Mean share of each present part's (layer-averaged) attention that falls
/// inside its mask, over examples and the given timesteps.
pub fn on_mask_attention_mass(
    ldm: &ToyLdm,
    state: &TrainState,
    examples: &[TrainingExample],
    layers: &[String],
    timesteps: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let den = ldm.denoiser(state.lora_tensors());
    let space = state.space();
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in examples.chunks(8) {
        let prompts = chunk
            .iter()
            .map(|ex| {
                let spec = PromptSpec {
                    template: state.template.clone(),
                    composition: ex.composition.clone(),
                    style_suffix: None,
                };
                Ok(ldm.text.tokenize(&spec, space)?.1)
            })
            .collect::<Result<Vec<_>>>()?;
        let ctx = ldm.text.encode(&prompts, Some(&state.table))?.detach();
        let z0 = Tensor::stack(&chunk.iter().map(|e| &e.latents).collect::<Vec<_>>(), 0)?;
        for &t in timesteps {
            let noise = gaussian(&mut rng, z0.dims())?;
            let ts = vec![t; chunk.len()];
            let zt = ldm.schedule.add_noise(&z0, &noise, &ts)?;
            let out = crate::backend::Denoiser::predict(&den, &zt, &ts, &ctx)?;
            for (b, (ex, p)) in chunk.iter().zip(&prompts).enumerate() {
                let (slots, cols): (Vec<usize>, Vec<usize>) = p.part_columns.iter().copied().unzip();
                if slots.is_empty() {
                    continue;
                }
                let t = collect_attention(&out.cross_attention, layers, b, &cols)?;
                let stack = AttentionStack::from_tensor(&t, layers.to_vec(), slots.clone())?;
                let mean = stack.layer_mean();
                let cells = stack.cells();
                for (j, &slot) in slots.iter().enumerate() {
                    let col = &mean[j * cells..(j + 1) * cells];
                    let mask = ex.masks.mask(slot);
                    let total: f64 = col.iter().sum();
                    if total > 0.0 {
                        let inside: f64 = col.iter().zip(mask).map(|(a, &m)| a * f64::from(m)).sum();
                        sum += inside / total;
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(input_err!("no supervised part to measure"));
    }
    Ok(sum / n as f64)
}

/// Reference row from the large-scale setting, kept as metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub lambda: f64,
    pub emr: f64,
    pub cosim: f64,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow { lambda: 0.1, emr: 0.339, cosim: 0.851 },
        ReferenceRow { lambda: 0.01, emr: 0.460, cosim: 0.882 },
        ReferenceRow { lambda: 0.001, emr: 0.445, cosim: 0.880 },
    ]
}

pub const DEFAULT_SWEEP: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub emr: f64,
    pub cosim: f64,
    pub on_mask_mass: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
    /// Published large-scale values, for orientation only.
    pub reference: Vec<ReferenceRow>,
}

impl SweepTable {
    /// λ values as columns, metrics as rows.
    pub fn to_markdown(&self) -> String {
        let fmt_l = |l: f64| format!("{l}");
        let mut s = String::from("| λ_attn |");
        for r in &self.rows {
            s += &format!(" {} |", fmt_l(r.lambda));
        }
        s += "\n|---|";
        s += &"---|".repeat(self.rows.len());
        let mut line = |name: &str, f: &dyn Fn(&SweepRow) -> String| {
            s += &format!("\n| {name} |");
            for r in &self.rows {
                s += &format!(" {} |", f(r));
            }
        };
        line("EMR (↑)", &|r| format!("{:.3}", r.emr));
        line("CoSim (↑)", &|r| format!("{:.3}", r.cosim));
        line("on-mask attention", &|r| format!("{:.3}", r.on_mask_mass));
        let refs = &self.reference;
        line("reference EMR", &|r| {
            refs.iter()
                .find(|x| x.lambda == r.lambda)
                .map_or("–".into(), |x| format!("{:.3}", x.emr))
        });
        line("reference CoSim", &|r| {
            refs.iter()
                .find(|x| x.lambda == r.lambda)
                .map_or("–".into(), |x| format!("{:.3}", x.cosim))
        });
        s.push('\n');
        s
    }
}

/// Inputs shared by every run of a sweep.
pub struct SweepSetup<'a> {
    pub ldm: &'a ToyLdm,
    pub space: PartSpace,
    pub examples: &'a [TrainingExample],
    pub config: TrainingConfig,
    /// Compositions to reconstruct (typically from held-out images).
    pub eval_corpus: &'a [PartComposition],
    pub eval_examples: &'a [TrainingExample],
    pub retagger: &'a Retagger,
    pub eval: EvalSettings,
}

/// Trains one model per λ and scores each with the reconstruction protocol.
pub fn lambda_sweep(setup: &SweepSetup<'_>, lambdas: &[f64]) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(input_err!("empty λ list"));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = setup.config.clone();
        cfg.attn.lambda = lambda;
        let report = train(setup.ldm, setup.space, setup.examples, &cfg, &TrainOptions::default())?;
        if let Some(msg) = &report.aborted {
            return Err(Error::Numeric(format!("λ = {lambda}: training aborted: {msg}")));
        }
        let generator = Generator::new(setup.ldm.clone(), &report.state)?;
        let eval = eval_reconstruction(setup.eval_corpus, &generator, setup.retagger, &setup.eval)?;
        let mass = on_mask_attention_mass(
            setup.ldm,
            &report.state,
            setup.eval_examples,
            &cfg.attn.layers,
            &[250, 500, 750],
            setup.eval.seed,
        )?;
        log::info!("λ = {lambda}: EMR {:.3}, CoSim {:.3}, on-mask {:.3}", eval.emr, eval.cosim, mass);
        rows.push(SweepRow {
            lambda,
            emr: eval.emr,
            cosim: eval.cosim,
            on_mask_mass: mass,
            steps: report.state.step,
        });
    }
    Ok(SweepTable {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        reference: reference_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> PartComposition {
        s.parse().unwrap()
    }

    #[test]
    fn emr_counts_present_reference_slots() {
        assert_eq!(emr(&c("0:1,1:2,2:3"), &c("0:1,1:2,2:3")).unwrap(), 1.0);
        assert_eq!(emr(&c("0:1,1:2,2:3,3:1,4:1,5:1"), &c("0:1,1:2,2:3,3:2,4:2,5:2")).unwrap(), 0.5);
        assert_eq!(emr(&c("0:1,1:-,2:3"), &c("0:1,1:2,2:-")).unwrap(), 0.5);
        assert!(emr(&c("0:1,1:2"), &c("0:1,1:2,2:1")).is_err());
        assert!(emr(&c("0:1,1:2"), &c("0:-,1:-")).is_err());
    }

    #[test]
    fn mixing_pops_distinct_slots() {
        let base = c("0:1,1:1,2:1,3:1");
        let donors = [c("0:2,1:2,2:2,3:2"), c("0:3,1:3,2:3,3:3"), c("0:4,1:4,2:4,3:4")];
        let refs: Vec<&PartComposition> = donors.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, slots) = mix_parts(&base, &refs, &mut rng).unwrap();
        let mut sorted = slots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        for (d, &s) in slots.iter().enumerate() {
            assert_eq!(out.codes()[s].variant, Some(d + 2));
        }
        let untouched = (0..4).find(|s| !slots.contains(s)).unwrap();
        assert_eq!(out.codes()[untouched].variant, Some(1));
    }

    #[test]
    fn composition_sets_do_not_overlap() {
        let corpus: Vec<PartComposition> = (1..=12)
            .map(|v| PartComposition::from_variants(&[Some(v), Some(v)]).unwrap())
            .collect();
        let a = composition_inputs(&corpus, 4, 1, 9).unwrap();
        let mut seen: Vec<_> = a.iter().map(|x| x.codes()[0].variant).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert!(composition_inputs(&corpus, 4, 13, 9).is_err());
    }

    #[test]
    fn sweep_table_has_one_column_per_lambda() {
        let t = SweepTable {
            schema_version: 1,
            rows: DEFAULT_SWEEP
                .iter()
                .map(|&l| SweepRow { lambda: l, emr: 0.5, cosim: 0.9, on_mask_mass: 0.4, steps: 1 })
                .collect(),
            reference: reference_rows(),
        };
        let md = t.to_markdown();
        assert!(md.starts_with("| λ_attn | 0.1 | 0.01 | 0.001 |"));
        assert!(md.contains("| reference EMR | 0.339 | 0.460 | 0.445 |"));
    }
}
