//! Retrieval ranking, Rank-1 / mAP / mINP, and the view protocols.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::view::View;

/// One embedded image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub feature: Vec<f64>,
    pub id: usize,
    pub view: View,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ALL")]
    All,
    #[serde(rename = "A<->A")]
    AerialAerial,
    #[serde(rename = "G<->G")]
    GroundGround,
    #[serde(rename = "A<->G")]
    AerialGround,
    #[serde(rename = "A->G")]
    AerialToGround,
    #[serde(rename = "G->A")]
    GroundToAerial,
}

/// Query and gallery view filters of one retrieval direction.
pub type Direction = (Option<View>, Option<View>);

impl Protocol {
    pub const CROSS_VIEW_BENCHMARK: [Protocol; 4] = [
        Protocol::All,
        Protocol::GroundGround,
        Protocol::AerialAerial,
        Protocol::AerialGround,
    ];

    pub const ALL_PROTOCOLS: [Protocol; 6] = [
        Protocol::All,
        Protocol::GroundGround,
        Protocol::AerialAerial,
        Protocol::AerialGround,
        Protocol::AerialToGround,
        Protocol::GroundToAerial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::All => "ALL",
            Protocol::AerialAerial => "A<->A",
            Protocol::GroundGround => "G<->G",
            Protocol::AerialGround => "A<->G",
            Protocol::AerialToGround => "A->G",
            Protocol::GroundToAerial => "G->A",
        }
    }

    /// Bidirectional cross-view protocols list both directions.
    pub fn directions(self) -> Vec<Direction> {
        use View::{Aerial, Ground};
        match self {
            Protocol::All => vec![(None, None)],
            Protocol::AerialAerial => vec![(Some(Aerial), Some(Aerial))],
            Protocol::GroundGround => vec![(Some(Ground), Some(Ground))],
            Protocol::AerialGround => vec![(Some(Aerial), Some(Ground)), (Some(Ground), Some(Aerial))],
            Protocol::AerialToGround => vec![(Some(Aerial), Some(Ground))],
            Protocol::GroundToAerial => vec![(Some(Ground), Some(Aerial))],
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "all" => Protocol::All,
            "aa" | "a<->a" => Protocol::AerialAerial,
            "gg" | "g<->g" => Protocol::GroundGround,
            "ag" | "a<->g" => Protocol::AerialGround,
            "a2g" | "a->g" => Protocol::AerialToGround,
            "g2a" | "g->a" => Protocol::GroundToAerial,
            other => return Err(Error::Config(format!("unknown protocol {other:?}"))),
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// Match flags of `gallery` sorted by descending cosine similarity to
/// `query`, ties broken by gallery position.
pub fn rank_gallery(query: &[f64], query_id: usize, gallery: &[(&[f64], usize)]) -> Result<Vec<bool>> {
    let nq = norm(query);
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, (g, gid)) in gallery.iter().enumerate() {
        if g.len() != query.len() {
            return Err(Error::Dimension(format!(
                "gallery item {i} has width {}, query has {}",
                g.len(),
                query.len()
            )));
        }
        // + 0.0 folds -0.0 into 0.0 so zero similarities tie
        scored.push((cosine_with_norms(query, nq, g, norm(g)) + 0.0, i, *gid == query_id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, _, m)| m).collect())
}

/// Mean over true matches of the precision at each match's rank; `None`
/// without matches.
pub fn average_precision(flags: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Number of true matches over the 1-based rank of the last one.
pub fn inverse_negative_penalty(flags: &[bool]) -> Option<f64> {
    let hits = flags.iter().filter(|&&f| f).count();
    let hardest = flags.iter().rposition(|&f| f)?;
    Some(hits as f64 / (hardest + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub num_queries: usize,
    /// Queries without any true match in their gallery.
    pub skipped_queries: usize,
    /// Per scored query: 1 when the top gallery item matches, else 0.
    pub top1: Vec<f64>,
    pub ap: Vec<f64>,
    pub inp: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl RetrievalReport {
    /// Aggregates per-query results; fails when no query was scorable.
    pub fn from_queries(protocol: Protocol, top1: Vec<f64>, ap: Vec<f64>, inp: Vec<f64>, skipped: usize) -> Result<Self> {
        if ap.is_empty() {
            return Err(Error::Protocol(format!(
                "{protocol}: no query has a true match in its gallery"
            )));
        }
        Ok(RetrievalReport {
            protocol,
            rank1: mean(&top1),
            map: mean(&ap),
            minp: mean(&inp),
            num_queries: ap.len(),
            skipped_queries: skipped,
            top1,
            ap,
            inp,
        })
    }
}

fn describe(filter: Option<View>) -> &'static str {
    filter.map_or("any view", View::as_str)
}

/// Runs `protocol` over one pool of embeddings. Each item of the query side
/// is ranked against the gallery side with itself removed. Bidirectional
/// protocols average the metrics of their two directions; the per-query
/// lists hold the queries of both.
pub fn evaluate_protocol(items: &[Embedded], protocol: Protocol) -> Result<RetrievalReport> {
    let parts = protocol
        .directions()
        .into_iter()
        .map(|d| evaluate_direction(items, protocol, d))
        .collect::<Result<Vec<_>>>()?;
    let mut report = RetrievalReport {
        protocol,
        rank1: 0.0,
        map: 0.0,
        minp: 0.0,
        num_queries: 0,
        skipped_queries: 0,
        top1: Vec::new(),
        ap: Vec::new(),
        inp: Vec::new(),
    };
    let n = parts.len() as f64;
    for p in parts {
        report.rank1 += p.rank1 / n;
        report.map += p.map / n;
        report.minp += p.minp / n;
        report.num_queries += p.num_queries;
        report.skipped_queries += p.skipped_queries;
        report.top1.extend(p.top1);
        report.ap.extend(p.ap);
        report.inp.extend(p.inp);
    }
    Ok(report)
}

fn evaluate_direction(items: &[Embedded], protocol: Protocol, (qf, gf): Direction) -> Result<RetrievalReport> {
    let keep = |f: Option<View>, v: View| f.is_none_or(|x| x == v);
    let queries: Vec<usize> = (0..items.len()).filter(|&i| keep(qf, items[i].view)).collect();
    let gallery: Vec<usize> = (0..items.len()).filter(|&i| keep(gf, items[i].view)).collect();
    if queries.is_empty() {
        return Err(Error::Protocol(format!("{protocol}: no queries with {}", describe(qf))));
    }
    let results = queries
        .par_iter()
        .map(|&q| -> Result<Option<(f64, f64, f64)>> {
            let g: Vec<(&[f64], usize)> = gallery
                .iter()
                .filter(|&&j| j != q)
                .map(|&j| (items[j].feature.as_slice(), items[j].id))
                .collect();
            if g.is_empty() {
                return Err(Error::Protocol(format!(
                    "{protocol}: empty gallery for filter {}",
                    describe(gf)
                )));
            }
            let flags = rank_gallery(&items[q].feature, items[q].id, &g)?;
            Ok(average_precision(&flags).map(|a| {
                let inp = inverse_negative_penalty(&flags).expect("has a match");
                (if flags[0] { 1.0 } else { 0.0 }, a, inp)
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut top1, mut ap, mut inp, mut skipped) = (Vec::new(), Vec::new(), Vec::new(), 0);
    for r in results {
        match r {
            Some((t, a, i)) => {
                top1.push(t);
                ap.push(a);
                inp.push(i);
            }
            None => skipped += 1,
        }
    }
    RetrievalReport::from_queries(protocol, top1, ap, inp, skipped)
}
