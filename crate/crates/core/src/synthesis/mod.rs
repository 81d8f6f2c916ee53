//! Teacher-driven data synthesis: instruction expansion and refinement,
//! instruction-response pairs from raw text, and chain-of-thought
//! generation, simplification and extension.
//!
//! Every operator sends templated prompts through a [`TeacherClient`] with
//! bounded concurrency, keeps input order, and tags each output with
//! [`Provenance`].

mod dedup;
mod parse;
mod prompt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer;
use crate::records::{CoTRecord, InstructionRecord, LabeledRecord, Provenance};
use crate::teacher::{map_ordered, TeacherClient, TeacherRequest, DEFAULT_SYSTEM_PROMPT};

pub use dedup::{dedup_by, trigram_similarity};
pub use parse::{chunk_text, extract_reasoning, parse_pairs, split_cot, ParsedPairs, INSTRUCTION_MARKER, RESPONSE_MARKER};
pub use prompt::PromptTemplate;

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;
pub const DEFAULT_COT_BEGIN: &str = "<think>";
pub const DEFAULT_COT_END: &str = "</think>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisOperator {
    Expand,
    Refine,
    PairsFromText,
    CotGenerate,
    CotSimplify,
    CotExtend,
}

impl SynthesisOperator {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Expand => "expand",
            Self::Refine => "refine",
            Self::PairsFromText => "pairs_from_text",
            Self::CotGenerate => "cot_generate",
            Self::CotSimplify => "cot_simplify",
            Self::CotExtend => "cot_extend",
        }
    }

    /// Default prompt text, shipped under `templates/`.
    pub fn default_template(self, grounded: bool) -> &'static str {
        match self {
            Self::Expand => include_str!("../../templates/expand.txt"),
            Self::Refine => include_str!("../../templates/refine.txt"),
            Self::PairsFromText => include_str!("../../templates/pairs.txt"),
            Self::CotGenerate if grounded => include_str!("../../templates/cot_generate_grounded.txt"),
            Self::CotGenerate => include_str!("../../templates/cot_generate.txt"),
            Self::CotSimplify => include_str!("../../templates/cot_simplify.txt"),
            Self::CotExtend => include_str!("../../templates/cot_extend.txt"),
        }
    }

    /// `(required, optional)` template slots.
    pub fn slots(self, grounded: bool) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Self::Expand => (&["instruction"], &["index"]),
            Self::Refine => (&["instruction"], &[]),
            Self::PairsFromText => (&["text"], &[]),
            Self::CotGenerate if grounded => (&["instruction", "answer"], &["begin", "end"]),
            Self::CotGenerate => (&["instruction"], &["begin", "end"]),
            Self::CotSimplify | Self::CotExtend => (&["instruction", "reasoning"], &["answer", "begin", "end"]),
        }
    }
}

/// Parameters shared by all synthesis operators.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisJob {
    pub operator: SynthesisOperator,
    pub template: PromptTemplate,
    /// New instructions requested per seed (expand only).
    pub fan_out: usize,
    pub dedup_threshold: f64,
    pub cot_begin: String,
    pub cot_end: String,
    /// CoT generation from instruction-response pairs.
    pub grounded: bool,
    pub system_prompt: String,
    /// Teacher context length; bounds text chunks.
    pub max_model_len: usize,
    pub concurrency: usize,
}

impl SynthesisJob {
    pub fn new(operator: SynthesisOperator) -> Self {
        Self::with_grounding(operator, false)
    }

    pub fn with_grounding(operator: SynthesisOperator, grounded: bool) -> Self {
        let template = Self::parse_template(operator, grounded, operator.default_template(grounded))
            .expect("shipped templates are valid");
        Self {
            operator,
            template,
            fan_out: 1,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            cot_begin: DEFAULT_COT_BEGIN.into(),
            cot_end: DEFAULT_COT_END.into(),
            grounded,
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            max_model_len: 4096,
            concurrency: 4,
        }
    }

    fn parse_template(operator: SynthesisOperator, grounded: bool, source: &str) -> Result<PromptTemplate> {
        let (required, optional) = operator.slots(grounded);
        PromptTemplate::parse(source, required, optional)
    }

    /// Replace the prompt template, checking its slots against the operator.
    pub fn set_template(&mut self, source: &str) -> Result<()> {
        self.template = Self::parse_template(self.operator, self.grounded, source)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.fan_out == 0 {
            return Err(Error::config("synthesis", "fan_out", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(Error::config("synthesis", "dedup_threshold", "must lie in [0, 1]"));
        }
        if self.cot_begin.is_empty() || self.cot_end.is_empty() {
            return Err(Error::config("synthesis", "cot_begin", "CoT markers must be non-empty"));
        }
        Ok(())
    }

    fn render(&self, values: &[(&'static str, &str)]) -> String {
        let mut map: BTreeMap<&str, &str> = values.iter().copied().collect();
        map.insert("begin", &self.cot_begin);
        map.insert("end", &self.cot_end);
        self.template.render(&map)
    }
}

/// A record that could not be produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed_id: usize,
    pub error: String,
}

/// Reasoning length in tokens before and after a rewrite.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthChange {
    pub seed_id: usize,
    pub before: usize,
    pub after: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub operator: String,
    /// Teacher outputs received before filtering.
    pub candidates: usize,
    pub kept: usize,
    pub deduplicated: usize,
    /// Emissions that did not parse (pairs blocks, CoT without markers).
    pub unparseable: usize,
    pub failures: Vec<SeedFailure>,
    /// Inputs kept unchanged or not rewritten as asked.
    pub flagged: Vec<usize>,
    pub length_changes: Vec<LengthChange>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized<T> {
    pub records: Vec<T>,
    pub report: SynthesisReport,
}

/// Raw teacher reply for one request; authentication errors abort the job.
fn ask_all(job: &SynthesisJob, client: &dyn TeacherClient, prompts: &[String]) -> Result<Vec<std::result::Result<String, String>>> {
    map_ordered(prompts, job.concurrency.max(1), |i, prompt| {
        let request = TeacherRequest {
            system: &job.system_prompt,
            user: prompt,
            id: i as u64,
        };
        match client.complete(&request) {
            Err(e @ Error::Auth { .. }) => Err(e),
            Err(e) => Ok(Err(e.to_string())),
            Ok(s) if s.trim().is_empty() => Ok(Err("teacher returned an empty response".into())),
            Ok(s) => Ok(Ok(s)),
        }
    })
}

fn provenance(job: &SynthesisJob, client: &dyn TeacherClient, seed_id: usize) -> Option<Provenance> {
    Some(Provenance {
        operator: job.operator.as_str().to_string(),
        seed_id,
        teacher_config_hash: client.config_hash(),
    })
}

fn expect_operator(job: &SynthesisJob, ops: &[SynthesisOperator]) -> Result<()> {
    job.validate()?;
    if ops.contains(&job.operator) {
        Ok(())
    } else {
        Err(Error::Contract(format!("job operator {} does not match the call", job.operator.as_str())))
    }
}

fn report(job: &SynthesisJob) -> SynthesisReport {
    SynthesisReport {
        operator: job.operator.as_str().to_string(),
        ..SynthesisReport::default()
    }
}

/// `fan_out` new instructions per seed, near-duplicates removed.
pub fn expand_instructions(
    seeds: &[InstructionRecord],
    job: &SynthesisJob,
    client: &dyn TeacherClient,
) -> Result<Synthesized<InstructionRecord>> {
    expect_operator(job, &[SynthesisOperator::Expand])?;
    if seeds.is_empty() {
        return Err(Error::EmptyDataset("expansion needs at least one seed".into()));
    }
    let prompts: Vec<String> = seeds
        .iter()
        .flat_map(|s| {
            (1..=job.fan_out).map(move |j| job.render(&[("instruction", s.instruction.as_str()), ("index", &j.to_string())]))
        })
        .collect();
    let replies = ask_all(job, client, &prompts)?;
    let mut rep = report(job);
    let mut candidates = Vec::new();
    for (i, reply) in replies.into_iter().enumerate() {
        let seed_id = i / job.fan_out;
        match reply {
            Ok(text) => candidates.push(InstructionRecord {
                instruction: text.trim().to_string(),
                provenance: provenance(job, client, seed_id),
            }),
            Err(error) => rep.failures.push(SeedFailure { seed_id, error }),
        }
    }
    rep.candidates = candidates.len();
    let (records, dropped) = dedup_by(candidates, job.dedup_threshold, |r| r.instruction.as_str());
    rep.deduplicated = dropped;
    rep.kept = records.len();
    Ok(Synthesized { records, report: rep })
}

/// One rewritten instruction per input; failures and empty replies keep
/// the original and flag it.
pub fn refine_instructions(
    instructions: &[InstructionRecord],
    job: &SynthesisJob,
    client: &dyn TeacherClient,
) -> Result<Synthesized<InstructionRecord>> {
    expect_operator(job, &[SynthesisOperator::Refine])?;
    let prompts: Vec<String> = instructions
        .iter()
        .map(|r| job.render(&[("instruction", r.instruction.as_str())]))
        .collect();
    let replies = ask_all(job, client, &prompts)?;
    let mut rep = report(job);
    let mut records = Vec::with_capacity(instructions.len());
    for (i, (orig, reply)) in instructions.iter().zip(replies).enumerate() {
        let text = match reply {
            Ok(t) => {
                rep.candidates += 1;
                t.trim().to_string()
            }
            Err(error) => {
                log::warn!("refine: keeping instruction {i} unchanged: {error}");
                rep.flagged.push(i);
                rep.failures.push(SeedFailure { seed_id: i, error });
                orig.instruction.clone()
            }
        };
        records.push(InstructionRecord {
            instruction: text,
            provenance: provenance(job, client, i),
        });
    }
    rep.kept = records.len();
    Ok(Synthesized { records, report: rep })
}

/// Instruction-response pairs drawn from raw documents, one prompt per
/// chunk.
pub fn pairs_from_text(
    documents: &[String],
    job: &SynthesisJob,
    client: &dyn TeacherClient,
) -> Result<Synthesized<LabeledRecord>> {
    expect_operator(job, &[SynthesisOperator::PairsFromText])?;
    let overhead = 1 + tokenizer::tokenize(&job.system_prompt).len() + tokenizer::tokenize(&job.render(&[("text", "")])).len();
    let budget = job.max_model_len.checked_sub(overhead).filter(|&b| b > 0).ok_or_else(|| {
        Error::config(
            "inference",
            "max_model_len",
            format!("{} tokens leave no room for text after a {overhead}-token prompt", job.max_model_len),
        )
    })?;
    let mut chunk_doc = Vec::new();
    let mut prompts = Vec::new();
    for (d, doc) in documents.iter().enumerate() {
        for chunk in chunk_text(doc, budget) {
            prompts.push(job.render(&[("text", chunk.as_str())]));
            chunk_doc.push(d);
        }
    }
    let replies = ask_all(job, client, &prompts)?;
    let mut rep = report(job);
    let mut records = Vec::new();
    for (reply, &doc) in replies.into_iter().zip(&chunk_doc) {
        match reply {
            Ok(text) => {
                let parsed = parse_pairs(&text);
                rep.candidates += parsed.pairs.len() + parsed.dropped;
                rep.unparseable += parsed.dropped;
                records.extend(parsed.pairs.into_iter().map(|(instruction, output)| LabeledRecord {
                    instruction,
                    output,
                    provenance: provenance(job, client, doc),
                }));
            }
            Err(error) => rep.failures.push(SeedFailure { seed_id: doc, error }),
        }
    }
    if rep.candidates > 0 && rep.unparseable * 2 > rep.candidates {
        let w = format!("{} of {} emitted pairs could not be parsed", rep.unparseable, rep.candidates);
        log::warn!("pairs_from_text: {w}");
        rep.warnings.push(w);
    }
    rep.kept = records.len();
    Ok(Synthesized { records, report: rep })
}

/// Reasoning and answer for each input. Grounded jobs pass the known
/// response into the prompt and fall back to it when the teacher's answer
/// is empty.
pub fn cot_generate(
    inputs: &[LabeledRecord],
    job: &SynthesisJob,
    client: &dyn TeacherClient,
) -> Result<Synthesized<CoTRecord>> {
    expect_operator(job, &[SynthesisOperator::CotGenerate])?;
    let prompts: Vec<String> = inputs
        .iter()
        .map(|r| job.render(&[("instruction", r.instruction.as_str()), ("answer", r.output.as_str())]))
        .collect();
    let replies = ask_all(job, client, &prompts)?;
    let mut rep = report(job);
    let mut records = Vec::new();
    for (i, (input, reply)) in inputs.iter().zip(replies).enumerate() {
        let text = match reply {
            Ok(t) => t,
            Err(error) => {
                rep.failures.push(SeedFailure { seed_id: i, error });
                continue;
            }
        };
        rep.candidates += 1;
        let Some((reasoning, mut answer)) = split_cot(&text, &job.cot_begin, &job.cot_end) else {
            rep.unparseable += 1;
            continue;
        };
        if answer.is_empty() {
            if job.grounded && !input.output.trim().is_empty() {
                answer = input.output.clone();
            } else {
                rep.unparseable += 1;
                continue;
            }
        }
        records.push(CoTRecord {
            instruction: input.instruction.clone(),
            reasoning,
            answer,
            provenance: provenance(job, client, i),
        });
    }
    rep.kept = records.len();
    Ok(Synthesized { records, report: rep })
}

fn rewrite_cots(cots: &[CoTRecord], job: &SynthesisJob, client: &dyn TeacherClient, shorter: bool) -> Result<Synthesized<CoTRecord>> {
    let prompts: Vec<String> = cots
        .iter()
        .map(|c| {
            job.render(&[
                ("instruction", c.instruction.as_str()),
                ("reasoning", c.reasoning.as_str()),
                ("answer", c.answer.as_str()),
            ])
        })
        .collect();
    let replies = ask_all(job, client, &prompts)?;
    let mut rep = report(job);
    let mut records = Vec::new();
    for (i, (cot, reply)) in cots.iter().zip(replies).enumerate() {
        let text = match reply {
            Ok(t) => t,
            Err(error) => {
                rep.failures.push(SeedFailure { seed_id: i, error });
                continue;
            }
        };
        rep.candidates += 1;
        let reasoning = extract_reasoning(&text, &job.cot_begin, &job.cot_end);
        if reasoning.is_empty() {
            rep.unparseable += 1;
            continue;
        }
        let before = tokenizer::tokenize(&cot.reasoning).len();
        let after = tokenizer::tokenize(&reasoning).len();
        if (shorter && after >= before) || (!shorter && after <= before) {
            let w = format!(
                "record {i}: reasoning went from {before} to {after} tokens, expected {}",
                if shorter { "fewer" } else { "more" }
            );
            log::warn!("{}: {w}", job.operator.as_str());
            rep.warnings.push(w);
            rep.flagged.push(i);
        }
        rep.length_changes.push(LengthChange { seed_id: i, before, after });
        records.push(CoTRecord {
            instruction: cot.instruction.clone(),
            reasoning,
            answer: cot.answer.clone(),
            provenance: provenance(job, client, i),
        });
    }
    rep.kept = records.len();
    Ok(Synthesized { records, report: rep })
}

/// Shorter reasoning with instruction and answer unchanged.
pub fn cot_simplify(cots: &[CoTRecord], job: &SynthesisJob, client: &dyn TeacherClient) -> Result<Synthesized<CoTRecord>> {
    expect_operator(job, &[SynthesisOperator::CotSimplify])?;
    rewrite_cots(cots, job, client, true)
}

/// Longer reasoning with instruction and answer unchanged.
pub fn cot_extend(cots: &[CoTRecord], job: &SynthesisJob, client: &dyn TeacherClient) -> Result<Synthesized<CoTRecord>> {
    expect_operator(job, &[SynthesisOperator::CotExtend])?;
    rewrite_cots(cots, job, client, false)
}
