//! Objective evaluation: verification threshold by equal error rate,
//! speaker verification accept rate (SVAR), character error rate, pair
//! sampling, and condition runners for clean, degraded, attacked and
//! single-degradation inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{embedding_attack, AttackConfig, AttackMode};
use crate::audio::{reconstruct_waveform, MelFrontend};
use crate::corpus::Dataset;
use crate::degrade::{apply, augment, AugmentationPolicy, NoiseCorpus, SingleDegradation};
use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::external::ExternalCommand;
use crate::model::{l1_loss, VcModel};
use crate::seed;
use crate::verifier::Verifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationTrial {
    pub score: f64,
    pub same_speaker: bool,
}

/// Candidate thresholds: one below every score, midpoints between
/// consecutive distinct scores, one above every score.
fn candidates(trials: &[VerificationTrial]) -> Vec<f64> {
    let mut s: Vec<f64> = trials.iter().map(|t| t.score).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = Vec::with_capacity(s.len() + 1);
    c.push(s[0] - 1.0);
    c.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(s[s.len() - 1] + 1.0);
    c
}

fn interpolate_crossing(ts: &[f64], fars: &[f64], frrs: &[f64]) -> (f64, f64) {
    let d = |i: usize| fars[i] - frrs[i];
    let i = (0..ts.len()).find(|&i| d(i) <= 0.0).expect("last candidate rejects everything");
    if d(i) == 0.0 || i == 0 {
        return (ts[i], fars[i]);
    }
    let lam = d(i - 1) / (d(i - 1) - d(i));
    (
        ts[i - 1] + lam * (ts[i] - ts[i - 1]),
        fars[i - 1] + lam * (fars[i] - fars[i - 1]),
    )
}

/// Threshold where false-accept and false-reject rates are equal, with
/// linear interpolation between the neighbouring operating points.
/// Returns `(threshold, eer)`.
pub fn calibrate_threshold(trials: &[VerificationTrial]) -> Result<(f64, f64)> {
    let np = trials.iter().filter(|t| t.same_speaker).count();
    let nn = trials.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::InvalidInput("threshold calibration needs both same- and different-speaker trials".into()));
    }
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::NonFinite("verification score".into()));
    }
    let mut sorted: Vec<VerificationTrial> = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let ts = candidates(trials);
    let (mut fars, mut frrs) = (Vec::with_capacity(ts.len()), Vec::with_capacity(ts.len()));
    // sweep thresholds upwards; `k` scores are <= the current threshold
    let (mut k, mut rejected_pos, mut rejected_neg) = (0usize, 0usize, 0usize);
    for &t in &ts {
        while k < sorted.len() && sorted[k].score <= t {
            if sorted[k].same_speaker {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            k += 1;
        }
        fars.push((nn - rejected_neg) as f64 / nn as f64);
        frrs.push(rejected_pos as f64 / np as f64);
    }
    Ok(interpolate_crossing(&ts, &fars, &frrs))
}

/// All ordered pairs of distinct utterances, scored by the verifier.
pub fn trial_grid(verifier: &Verifier, data: &Dataset) -> Result<Vec<VerificationTrial>> {
    let embs: Vec<Vec<f64>> = data.utterances.iter().map(|u| verifier.embed(&u.wave)).collect::<Result<_>>()?;
    let mut trials = Vec::with_capacity(data.len() * data.len().saturating_sub(1));
    for (i, a) in data.utterances.iter().enumerate() {
        for (j, b) in data.utterances.iter().enumerate() {
            if i != j {
                trials.push(VerificationTrial {
                    score: crate::verifier::cosine(&embs[i], &embs[j]),
                    same_speaker: a.speaker == b.speaker,
                });
            }
        }
    }
    Ok(trials)
}

/// Percentage of similarities strictly above `threshold`.
pub fn svar(similarities: &[f64], threshold: f64) -> Result<f64> {
    if similarities.is_empty() {
        return Err(Error::InvalidInput("svar over zero conversions".into()));
    }
    let accepted = similarities.iter().filter(|&&s| s > threshold).count();
    Ok(accepted as f64 / similarities.len() as f64 * 100.0)
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `hypothesis` against `reference`. An empty
/// reference yields the hypothesis length.
pub fn cer(hypothesis: &str, reference: &str) -> f64 {
    let n = reference.chars().count();
    if n == 0 {
        return hypothesis.chars().count() as f64;
    }
    levenshtein(hypothesis, reference) as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionPair {
    pub source_utterance_id: String,
    pub target_utterance_id: String,
    pub third_speaker_id: Option<String>,
    pub third_utterance_id: Option<String>,
}

/// `n` pairs with distinct source and target speakers; with `with_third`,
/// each pair also gets a third speaker different from both.
pub fn sample_pairs<R: Rng + ?Sized>(data: &Dataset, n: usize, rng: &mut R, with_third: bool) -> Result<Vec<ConversionPair>> {
    let speakers = data.speakers();
    let needed = if with_third { 3 } else { 2 };
    if speakers.len() < needed {
        return Err(Error::InvalidInput(format!(
            "pair sampling needs {needed} speakers, found {}",
            speakers.len()
        )));
    }
    let by: Vec<Vec<&str>> = speakers
        .iter()
        .map(|s| data.by_speaker(s).iter().map(|u| u.id.as_str()).collect())
        .collect();
    let pick = |rng: &mut R, v: &[&str]| v[rng.random_range(0..v.len())].to_string();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(0..speakers.len());
        let mut t = rng.random_range(0..speakers.len() - 1);
        if t >= s {
            t += 1;
        }
        let src = pick(rng, &by[s]);
        let tgt = pick(rng, &by[t]);
        let (third_speaker_id, third_utterance_id) = if with_third {
            let others: Vec<usize> = (0..speakers.len()).filter(|&i| i != s && i != t).collect();
            let k = others[rng.random_range(0..others.len())];
            (Some(speakers[k].clone()), Some(pick(rng, &by[k])))
        } else {
            (None, None)
        };
        out.push(ConversionPair {
            source_utterance_id: src,
            target_utterance_id: tgt,
            third_speaker_id,
            third_utterance_id,
        });
    }
    Ok(out)
}

/// Input condition of an evaluation cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Degraded,
    Attacked,
    Single(SingleDegradation),
}

impl Condition {
    pub fn name(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Degraded => "degraded".into(),
            Condition::Attacked => "attacked".into(),
            Condition::Single(d) => format!("single_{}", d.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_pairs: usize,
    pub seed: u64,
    pub griffin_lim_iters: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_pairs: 250,
            seed: 0,
            griffin_lim_iters: 32,
        }
    }
}

/// Everything one evaluation cell needs. `attack_model` is the bare VC
/// model the attacker differentiates through; the enhancer is never part
/// of it.
pub struct EvalContext<'a> {
    pub model: &'a VcModel,
    pub attack_model: &'a VcModel,
    pub enhancer: &'a Enhancer,
    pub verifier: &'a Verifier,
    pub data: &'a Dataset,
    pub test_noise: &'a NoiseCorpus,
    pub test_policy: &'a AugmentationPolicy,
    pub attack: &'a AttackConfig,
    pub settings: &'a EvalSettings,
    pub threshold: f64,
    pub eer: f64,
    pub transcriber: Option<&'a ExternalCommand>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub source_utterance_id: String,
    pub target_utterance_id: String,
    pub third_speaker_id: Option<String>,
    pub similarity: f64,
    pub accepted: bool,
    /// Self-reconstruction L1 of the (possibly degraded) source against its clean mel.
    pub reconstruction_loss: f64,
    /// Largest absolute perturbation applied by an attack.
    pub perturbation_linf: Option<f64>,
    pub cer: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cer_empty_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub defense: String,
    pub threshold: f64,
    pub eer: f64,
    pub svar: f64,
    pub svar_stderr: f64,
    pub mean_similarity: f64,
    pub mean_reconstruction_loss: f64,
    pub mean_cer: Option<f64>,
    pub n_pairs: usize,
    pub config_hashes: BTreeMap<String, String>,
    pub records: Vec<PairRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from(
            "pair_id,source,target,third_speaker,similarity,accepted,reconstruction_loss,perturbation_linf,cer\n",
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{:.6},{},{}",
                r.pair_id,
                r.source_utterance_id,
                r.target_utterance_id,
                r.third_speaker_id.as_deref().unwrap_or(""),
                r.similarity,
                r.accepted,
                r.reconstruction_loss,
                r.perturbation_linf.map(|v| format!("{v:.6}")).unwrap_or_default(),
                r.cer.map(|v| format!("{v:.4}")).unwrap_or_default(),
            );
        }
        out
    }
}

fn utt<'a>(data: &'a Dataset, id: &str) -> Result<&'a crate::corpus::Utterance> {
    data.get(id)
        .ok_or_else(|| Error::InvalidInput(format!("utterance {id} not in evaluation set")))
}

/// Runs one condition over `pairs`. Every random choice is derived from
/// the settings seed and the pair index, so cells are independent.
pub fn evaluate(
    ctx: &EvalContext,
    condition: Condition,
    defense: &str,
    pairs: &[ConversionPair],
    config_hashes: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no conversion pairs".into()));
    }
    let fe = MelFrontend::new(&ctx.model.features)?;
    let mut records = Vec::with_capacity(pairs.len());
    let s = ctx.settings.seed;
    for (i, pair) in pairs.iter().enumerate() {
        let src = &utt(ctx.data, &pair.source_utterance_id)?.wave;
        let tgt_u = utt(ctx.data, &pair.target_utterance_id)?;
        let tgt = &tgt_u.wave;
        let src_u = utt(ctx.data, &pair.source_utterance_id)?;
        let mut linf = None;
        let (src_in, tgt_in) = match condition {
            Condition::Clean => (src.clone(), tgt.clone()),
            Condition::Degraded => {
                let mut rs = seed::derived_rng(s, "eval.degrade.source", i as u64);
                let mut rt = seed::derived_rng(s, "eval.degrade.target", i as u64);
                let a = augment(src, ctx.test_policy, Some(ctx.test_noise), &mut rs)?.0;
                let b = augment(tgt, ctx.test_policy, Some(ctx.test_noise), &mut rt)?.0;
                (a, b)
            }
            Condition::Single(d) => {
                let mut rs = seed::derived_rng(s, "eval.degrade.source", i as u64);
                let mut rt = seed::derived_rng(s, "eval.degrade.target", i as u64);
                let a = apply(src, &d.sample(ctx.test_policy, Some(ctx.test_noise), &mut rs)?, Some(ctx.test_noise))?;
                let b = apply(tgt, &d.sample(ctx.test_policy, Some(ctx.test_noise), &mut rt)?, Some(ctx.test_noise))?;
                (a, b)
            }
            Condition::Attacked => {
                let third = match (ctx.attack.mode, &pair.third_utterance_id) {
                    (AttackMode::Targeted, Some(id)) => Some(&utt(ctx.data, id)?.wave),
                    (AttackMode::Targeted, None) => {
                        return Err(Error::InvalidInput(format!("pair {i} has no third speaker for a targeted attack")))
                    }
                    (AttackMode::Untargeted, _) => None,
                };
                let cfg = AttackConfig {
                    seed: seed::derive(s, "eval.attack", i as u64),
                    ..ctx.attack.clone()
                };
                let afe = MelFrontend::new(&ctx.attack_model.features)?;
                let adv = embedding_attack(ctx.attack_model, &afe, tgt, &cfg, third)?.wave;
                linf = Some(adv.max_abs_diff(tgt));
                (src.clone(), adv)
            }
        };
        let src_in = ctx.enhancer.enhance(&src_in)?;
        let tgt_in = ctx.enhancer.enhance(&tgt_in)?;
        let src_mel = fe.extract(&src_in)?;
        let tgt_mel = fe.extract(&tgt_in)?;
        let converted_mel = ctx.model.convert(&src_mel, &tgt_mel)?;
        let recon = ctx.model.convert(&src_mel, &src_mel)?;
        let reconstruction_loss = l1_loss(&recon.frames, &fe.extract(src)?.frames)?;
        let converted = reconstruct_waveform(
            &converted_mel,
            &ctx.model.features,
            ctx.settings.griffin_lim_iters,
            seed::derive(s, "eval.vocoder", i as u64),
        )?;
        let similarity = ctx.verifier.similarity(&converted, tgt)?;
        let (cer_value, empty_ref) = match ctx.transcriber {
            Some(cmd) => {
                let dir = tempfile::tempdir()?;
                let p = dir.path().join("converted.wav");
                crate::wav::write_wav(&p, &converted)?;
                let hyp = cmd.run(&p, None)?;
                (Some(cer(hyp.trim(), &src_u.text)), src_u.text.is_empty())
            }
            None => (None, false),
        };
        records.push(PairRecord {
            pair_id: i,
            source_utterance_id: pair.source_utterance_id.clone(),
            target_utterance_id: pair.target_utterance_id.clone(),
            third_speaker_id: pair.third_speaker_id.clone(),
            similarity,
            accepted: similarity > ctx.threshold,
            reconstruction_loss,
            perturbation_linf: linf,
            cer: cer_value,
            cer_empty_reference: empty_ref,
        });
    }
    let sims: Vec<f64> = records.iter().map(|r| r.similarity).collect();
    let rate = svar(&sims, ctx.threshold)?;
    let n = records.len() as f64;
    let p = rate / 100.0;
    let cers: Vec<f64> = records.iter().filter_map(|r| r.cer).collect();
    Ok(EvalReport {
        condition: condition.name(),
        defense: defense.to_string(),
        threshold: ctx.threshold,
        eer: ctx.eer,
        svar: rate,
        svar_stderr: 100.0 * (p * (1.0 - p) / n).sqrt(),
        mean_similarity: sims.iter().sum::<f64>() / n,
        mean_reconstruction_loss: records.iter().map(|r| r.reconstruction_loss).sum::<f64>() / n,
        mean_cer: (!cers.is_empty()).then(|| cers.iter().sum::<f64>() / cers.len() as f64),
        n_pairs: records.len(),
        config_hashes,
        records,
    })
}

/// One report per single-degradation condition, all other settings fixed.
pub fn run_ablation(
    ctx: &EvalContext,
    defense: &str,
    pairs: &[ConversionPair],
    config_hashes: &BTreeMap<String, String>,
) -> Result<Vec<EvalReport>> {
    SingleDegradation::ALL
        .iter()
        .map(|d| evaluate(ctx, Condition::Single(*d), defense, pairs, config_hashes.clone()))
        .collect()
}

/// Aligned plain-text summary of several reports.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut rows = vec![[
        "condition".to_string(),
        "defense".to_string(),
        "svar_%".to_string(),
        "stderr".to_string(),
        "mean_sim".to_string(),
        "recon_l1".to_string(),
        "cer".to_string(),
    ]];
    for r in reports {
        rows.push([
            r.condition.clone(),
            r.defense.clone(),
            format!("{:.1}", r.svar),
            format!("{:.1}", r.svar_stderr),
            format!("{:.4}", r.mean_similarity),
            format!("{:.4}", r.mean_reconstruction_loss),
            r.mean_cer.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into()),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Grouped SVG bar chart of `value(report)` per condition and defense.
pub fn bar_chart_svg(reports: &[EvalReport], title: &str, max: f64, value: impl Fn(&EvalReport) -> f64) -> String {
    let mut conditions: Vec<&str> = Vec::new();
    let mut defenses: Vec<&str> = Vec::new();
    for r in reports {
        if !conditions.contains(&r.condition.as_str()) {
            conditions.push(&r.condition);
        }
        if !defenses.contains(&r.defense.as_str()) {
            defenses.push(&r.defense);
        }
    }
    let colors = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];
    let (bar_w, gap, h, top, left) = (18.0, 24.0, 220.0, 40.0, 50.0);
    let group_w = bar_w * defenses.len() as f64 + gap;
    let width = left + group_w * conditions.len() as f64 + 160.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        h + top + 60.0
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="14">{title}</text>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + h
    );
    for (ci, c) in conditions.iter().enumerate() {
        let gx = left + gap / 2.0 + ci as f64 * group_w;
        for (di, d) in defenses.iter().enumerate() {
            if let Some(r) = reports.iter().find(|r| r.condition == *c && r.defense == *d) {
                let v = value(r).clamp(0.0, max);
                let bh = if max > 0.0 { h * v / max } else { 0.0 };
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{bh:.1}" fill="{}"><title>{c} / {d}: {:.2}</title></rect>"#,
                    gx + di as f64 * bar_w,
                    top + h - bh,
                    colors[di % colors.len()],
                    value(r)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{c}</text>"#,
            gx,
            top + h + 16.0
        );
    }
    for (di, d) in defenses.iter().enumerate() {
        let y = top + 14.0 * di as f64;
        let x = left + group_w * conditions.len() as f64 + 10.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{d}</text>"#,
            colors[di % colors.len()],
            x + 14.0,
            y + 9.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trials(pos: &[f64], neg: &[f64]) -> Vec<VerificationTrial> {
        pos.iter()
            .map(|&s| VerificationTrial { score: s, same_speaker: true })
            .chain(neg.iter().map(|&s| VerificationTrial { score: s, same_speaker: false }))
            .collect()
    }

    /// Rates at threshold `t`: accept iff `score > t`.
    fn rates_at(trials: &[VerificationTrial], t: f64) -> (f64, f64) {
        let (mut fa, mut fr, mut np, mut nn) = (0usize, 0usize, 0usize, 0usize);
        for tr in trials {
            if tr.same_speaker {
                np += 1;
                fr += usize::from(tr.score <= t);
            } else {
                nn += 1;
                fa += usize::from(tr.score > t);
            }
        }
        (fa as f64 / nn as f64, fr as f64 / np as f64)
    }

    /// Independent oracle: counts rates from scratch at every candidate.
    fn brute_force(tr: &[VerificationTrial]) -> (f64, f64) {
        let ts = candidates(tr);
        let (fars, frrs): (Vec<f64>, Vec<f64>) = ts.iter().map(|&t| rates_at(tr, t)).unzip();
        interpolate_crossing(&ts, &fars, &frrs)
    }

    #[test]
    fn separable_scores_give_zero_eer() {
        let (t, e) = calibrate_threshold(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(e, 0.0);
        assert!(t > 0.2 && t < 0.8);
    }

    #[test]
    fn hand_case_crosses_at_one_half() {
        let tr = trials(&[0.6, 0.2], &[0.5, 0.1]);
        let (t, e) = calibrate_threshold(&tr).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        assert_eq!((t, e), brute_force(&tr));
    }

    #[test]
    fn identical_distributions_give_half() {
        let mut rng = seed::rng(1);
        let pos: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let neg: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let (_, e) = calibrate_threshold(&trials(&pos, &neg)).unwrap();
        assert!((e - 0.5).abs() < 0.05);
    }

    #[test]
    fn single_label_is_rejected() {
        assert!(calibrate_threshold(&trials(&[0.1], &[])).is_err());
    }

    #[test]
    fn svar_and_cer_cases() {
        assert_eq!(svar(&[0.9, 0.8], 0.5).unwrap(), 100.0);
        assert_eq!(svar(&[0.9, 0.8, 0.7, 0.1, 0.2], 0.5).unwrap(), 60.0);
        assert_eq!(cer("abc", "abc"), 0.0);
        assert!((cer("abc", "axc") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("", "ab"), 1.0);
        assert_eq!(cer("xyz", ""), 3.0);
    }

    #[test]
    fn pairs_have_distinct_speakers() {
        let corpus = crate::corpus::generate(&crate::corpus::ToyCorpusConfig {
            train_speakers: 2,
            eval_speakers: 3,
            utterances_per_speaker: 2,
            utterance_s: 0.3,
            noise_clips_per_family: 1,
            noise_clip_s: 0.5,
            seed: 2,
        });
        let pairs = sample_pairs(&corpus.eval, 10_000, &mut seed::rng(3), true).unwrap();
        let spk = |id: &str| corpus.eval.get(id).unwrap().speaker.clone();
        for p in &pairs {
            let (s, t) = (spk(&p.source_utterance_id), spk(&p.target_utterance_id));
            assert_ne!(s, t);
            let third = p.third_speaker_id.clone().unwrap();
            assert_ne!(third, t);
            assert_eq!(spk(p.third_utterance_id.as_ref().unwrap()), third);
        }
        assert_eq!(pairs, sample_pairs(&corpus.eval, 10_000, &mut seed::rng(3), true).unwrap());
        let two = crate::corpus::Dataset {
            utterances: corpus.eval.utterances[..4].to_vec(),
        };
        assert!(sample_pairs(&two, 5, &mut seed::rng(0), true).is_err());
    }

    #[test]
    fn table_and_svg_render() {
        let r = EvalReport {
            condition: "clean".into(),
            defense: "baseline".into(),
            threshold: 0.5,
            eer: 0.1,
            svar: 80.0,
            svar_stderr: 4.0,
            mean_similarity: 0.7,
            mean_reconstruction_loss: 0.3,
            mean_cer: None,
            n_pairs: 100,
            config_hashes: BTreeMap::new(),
            records: vec![],
        };
        let t = summary_table(&[r.clone()]);
        assert!(t.lines().nth(1).unwrap().starts_with("clean"));
        let svg = bar_chart_svg(&[r], "SVAR", 100.0, |r| r.svar);
        assert!(svg.starts_with("<svg") && svg.contains("<rect"));
    }
}
