//! In-memory message passing between peers.
//!
//! [`run_simulation`] drives the same per-peer state machines as the
//! aggregation engine, but every value that crosses a peer boundary goes
//! through a [`Message`] and is read back from the receiver's inbox. The
//! resulting [`Transcript`] is what an honest-but-curious observer gets to
//! look at (see [`peer_view`]).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::ObserverView;
use crate::aggregate::{
    combine_z, initial_duals, partial_z, validate_inputs, AdmmConfig, AggregationMode, PeerAdmmState,
};
use crate::error::{Error, Result};
use crate::params::{ParamVector, PeerId};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Y,
    PartialZ,
    FinalZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    Peer(PeerId),
    Group(usize),
    /// The consensus value every peer derives locally.
    Consensus,
}

impl Sender {
    fn rank(&self) -> usize {
        match *self {
            Sender::Peer(k) => k,
            Sender::Group(g) => g,
            Sender::Consensus => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Members(Vec<PeerId>),
    All,
}

impl Audience {
    pub fn includes(&self, peer: PeerId) -> bool {
        match self {
            Audience::Members(m) => m.contains(&peer),
            Audience::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Message<T> {
    pub iteration: usize,
    pub kind: MessageKind,
    pub sender: Sender,
    pub audience: Audience,
    pub payload: ParamVector<T>,
}

impl<T> Message<T> {
    fn order_key(&self) -> (usize, MessageKind, usize) {
        (self.iteration, self.kind, self.sender.rank())
    }
}

/// Run metadata written as the first transcript record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TranscriptHeader<T> {
    pub n: usize,
    pub rho: T,
    pub shape: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
    pub lambda_init: String,
    pub aggregation: AggregationMode,
}

/// A peer's private inputs. Kept in the transcript as simulation ground
/// truth; [`peer_view`] only ever hands an observer its own record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PeerRecord<T> {
    pub peer: PeerId,
    pub w: ParamVector<T>,
    pub lambda0: ParamVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript<T> {
    pub header: TranscriptHeader<T>,
    pub peers: Vec<PeerRecord<T>>,
    pub messages: Vec<Message<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", bound = "T: Real")]
enum Record<T> {
    Header(TranscriptHeader<T>),
    Peer(PeerRecord<T>),
    Message(Message<T>),
}

impl<T: Real> Transcript<T> {
    /// `FINAL_Z` payloads in iteration order.
    pub fn consensus_sequence(&self) -> Vec<&ParamVector<T>> {
        self.messages
            .iter()
            .filter(|m| m.kind == MessageKind::FinalZ)
            .map(|m| &m.payload)
            .collect()
    }

    pub fn messages_at(&self, iteration: usize, kind: MessageKind) -> impl Iterator<Item = &Message<T>> {
        self.messages
            .iter()
            .filter(move |m| m.iteration == iteration && m.kind == kind)
    }

    /// JSON lines: header, then peer records, then messages.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let mut line = |rec: &Record<T>| -> Result<()> {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(&Record::Header(self.header.clone()))?;
        for p in &self.peers {
            line(&Record::Peer(p.clone()))?;
        }
        for m in &self.messages {
            line(&Record::Message(m.clone()))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut header = None;
        let mut peers = Vec::new();
        let mut messages = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record<T>>(&line)? {
                Record::Header(h) if lineno == 0 => header = Some(h),
                Record::Header(_) => return Err(Error::Transcript("header must be the first record".into())),
                Record::Peer(p) => peers.push(p),
                Record::Message(m) => messages.push(m),
            }
        }
        let header = header.ok_or_else(|| Error::Transcript("missing header record".into()))?;
        let tr = Self { header, peers, messages };
        if tr.messages.windows(2).any(|w| w[0].order_key() > w[1].order_key()) {
            return Err(Error::Transcript("messages out of canonical order".into()));
        }
        Ok(tr)
    }

    /// Recomputes every consensus value from the `Y` messages alone.
    pub fn replay(&self) -> Result<Vec<ParamVector<T>>> {
        let n = self.header.n;
        (1..=self.header.iterations)
            .map(|i| {
                let ys: BTreeMap<PeerId, &ParamVector<T>> = self
                    .messages_at(i, MessageKind::Y)
                    .filter_map(|m| match m.sender {
                        Sender::Peer(k) => Some((k, &m.payload)),
                        _ => None,
                    })
                    .collect();
                let partials: Vec<ParamVector<T>> = self
                    .header
                    .aggregation
                    .groups_at(i, n)
                    .iter()
                    .map(|g| {
                        let members: Vec<&ParamVector<T>> = g
                            .iter()
                            .map(|k| {
                                ys.get(k)
                                    .copied()
                                    .ok_or_else(|| Error::MissingMessage(format!("Y from peer {k} at iteration {i}")))
                            })
                            .collect::<Result<_>>()?;
                        partial_z(&members, n)
                    })
                    .collect::<Result<_>>()?;
                combine_z(&partials.iter().collect::<Vec<_>>())
            })
            .collect()
    }

    /// Checks that the replayed consensus matches `FINAL_Z` bit for bit and
    /// that each iteration's `PARTIAL_Z` payloads sum to its `FINAL_Z`.
    pub fn verify(&self) -> Result<()> {
        let finals = self.consensus_sequence();
        let replayed = self.replay()?;
        if finals.len() != replayed.len() {
            return Err(Error::Transcript(format!(
                "{} FINAL_Z records for {} iterations",
                finals.len(),
                replayed.len()
            )));
        }
        for (i, (f, r)) in finals.iter().zip(&replayed).enumerate() {
            if *f != r {
                return Err(Error::Transcript(format!("replay diverges at iteration {}", i + 1)));
            }
            let partials: Vec<&ParamVector<T>> = self.messages_at(i + 1, MessageKind::PartialZ).map(|m| &m.payload).collect();
            if combine_z(&partials)? != **f {
                return Err(Error::Transcript(format!("partials do not sum to z at iteration {}", i + 1)));
            }
        }
        Ok(())
    }
}

/// Lossless in-memory transport. Inboxes hold indices into the log.
struct Network<T> {
    log: Vec<Message<T>>,
    inboxes: Vec<Vec<usize>>,
}

impl<T: Real> Network<T> {
    fn new(n: usize) -> Self {
        Self {
            log: Vec::new(),
            inboxes: vec![Vec::new(); n],
        }
    }

    fn send(&mut self, msg: Message<T>) {
        let idx = self.log.len();
        for (peer, inbox) in self.inboxes.iter_mut().enumerate() {
            if msg.audience.includes(peer) {
                inbox.push(idx);
            }
        }
        self.log.push(msg);
    }

    /// Payloads of `kind` messages received by `peer` at `iteration`, in
    /// ascending sender order.
    fn received(&self, peer: PeerId, iteration: usize, kind: MessageKind) -> Vec<(Sender, &ParamVector<T>)> {
        let mut out: Vec<(Sender, &ParamVector<T>)> = self.inboxes[peer]
            .iter()
            .map(|&i| &self.log[i])
            .filter(|m| m.iteration == iteration && m.kind == kind)
            .map(|m| (m.sender, &m.payload))
            .collect();
        out.sort_by_key(|(s, _)| *s);
        out
    }
}

/// Runs the protocol through the message harness.
///
/// The returned consensus is bit-identical to
/// [`run_aggregation`](crate::aggregate::run_aggregation) with the same
/// inputs and seed.
pub fn run_simulation<T: Real>(
    ws: &[ParamVector<T>],
    cfg: &AdmmConfig<T>,
    seed: u64,
) -> Result<(ParamVector<T>, Transcript<T>)> {
    validate_inputs(ws)?;
    cfg.validate(ws.len())?;
    let n = ws.len();
    let rho = cfg.rho;
    let lambdas = initial_duals(n, ws[0].shape(), &cfg.lambda_init, seed)?;
    let mut states: Vec<PeerAdmmState<T>> = ws
        .iter()
        .zip(&lambdas)
        .enumerate()
        .map(|(k, (w, l))| PeerAdmmState::new(k, w.clone(), l.clone()))
        .collect::<Result<_>>()?;

    let all_to_all = matches!(cfg.mode, AggregationMode::AllToAll);
    let mut net = Network::new(n);
    let mut z_prev = ParamVector::zeros(ws[0].shape())?;
    let mut iterations = 0;

    for i in 1..=cfg.max_iterations {
        iterations = i;
        let groups = cfg.mode.groups_at(i, n);
        let mut group_of = vec![0usize; n];
        for (g, members) in groups.iter().enumerate() {
            for &k in members {
                group_of[k] = g;
            }
        }

        let ys: Vec<ParamVector<T>> = states
            .par_iter_mut()
            .map(|s| s.primal_step(rho))
            .collect::<Result<_>>()?;
        for (k, y) in ys.into_iter().enumerate() {
            let audience = if all_to_all {
                Audience::All
            } else {
                Audience::Members(groups[group_of[k]].clone())
            };
            net.send(Message {
                iteration: i,
                kind: MessageKind::Y,
                sender: Sender::Peer(k),
                audience,
                payload: y,
            });
        }

        // Every member of a group derives the group sum from its own inbox.
        let mut partials = Vec::with_capacity(groups.len());
        for members in &groups {
            let mut agreed: Option<ParamVector<T>> = None;
            for &k in members {
                let received = net.received(k, i, MessageKind::Y);
                let ys: Vec<&ParamVector<T>> = received.iter().map(|(_, p)| *p).collect();
                if ys.len() != members.len() {
                    return Err(Error::MissingMessage(format!(
                        "peer {k} saw {} of {} Y messages at iteration {i}",
                        ys.len(),
                        members.len()
                    )));
                }
                let zg = partial_z(&ys, n)?;
                match &agreed {
                    Some(prev) if *prev != zg => {
                        return Err(Error::Transcript(format!("group members disagree at iteration {i}")))
                    }
                    Some(_) => {}
                    None => agreed = Some(zg),
                }
            }
            partials.push(agreed.ok_or(Error::Empty("group"))?);
        }
        for (g, zg) in partials.into_iter().enumerate() {
            net.send(Message {
                iteration: i,
                kind: MessageKind::PartialZ,
                sender: Sender::Group(g),
                audience: Audience::All,
                payload: zg,
            });
        }

        let local_z: Vec<ParamVector<T>> = (0..n)
            .map(|k| {
                let parts: Vec<&ParamVector<T>> = net
                    .received(k, i, MessageKind::PartialZ)
                    .into_iter()
                    .map(|(_, p)| p)
                    .collect();
                combine_z(&parts)
            })
            .collect::<Result<_>>()?;
        let z = local_z[0].clone();
        if local_z.iter().any(|zk| *zk != z) {
            return Err(Error::Transcript(format!("peers disagree on z at iteration {i}")));
        }
        states
            .par_iter_mut()
            .zip(local_z.par_iter())
            .map(|(s, zk)| s.dual_step(zk, rho))
            .collect::<Result<Vec<()>>>()?;
        net.send(Message {
            iteration: i,
            kind: MessageKind::FinalZ,
            sender: Sender::Consensus,
            audience: Audience::All,
            payload: z.clone(),
        });

        let settled = match cfg.early_stop {
            Some(eps) => z.l2_distance(&z_prev)? <= eps,
            None => false,
        };
        z_prev = z;
        if settled {
            break;
        }
    }

    let mut messages = net.log;
    messages.sort_by_key(|m| m.order_key());
    let transcript = Transcript {
        header: TranscriptHeader {
            n,
            rho,
            shape: ws[0].shape().to_vec(),
            iterations,
            seed,
            lambda_init: cfg.lambda_init.label().to_string(),
            aggregation: cfg.mode.clone(),
        },
        peers: ws
            .iter()
            .zip(lambdas)
            .enumerate()
            .map(|(peer, (w, lambda0))| PeerRecord {
                peer,
                w: w.clone(),
                lambda0,
            })
            .collect(),
        messages,
    };
    Ok((z_prev, transcript))
}

/// Everything `observer` legitimately saw during the run: the `Y` messages
/// addressed to it, every `PARTIAL_Z` and `FINAL_Z`, the public parameters,
/// and its own private record.
pub fn peer_view<T: Real>(tr: &Transcript<T>, observer: PeerId) -> Result<ObserverView<T>> {
    let n = tr.header.n;
    if observer >= n {
        return Err(Error::UnknownPeer { peer: observer, n });
    }
    let own = tr
        .peers
        .iter()
        .find(|p| p.peer == observer)
        .cloned()
        .ok_or_else(|| Error::Transcript(format!("no private record for peer {observer}")))?;
    let iterations = tr.header.iterations;

    let mut received_y: BTreeMap<(usize, PeerId), ParamVector<T>> = BTreeMap::new();
    let mut partial_z: Vec<Vec<ParamVector<T>>> = vec![Vec::new(); iterations];
    let mut z: Vec<ParamVector<T>> = Vec::with_capacity(iterations);
    for m in &tr.messages {
        if m.iteration == 0 || m.iteration > iterations || !m.audience.includes(observer) {
            continue;
        }
        match (m.kind, m.sender) {
            (MessageKind::Y, Sender::Peer(k)) => {
                received_y.insert((m.iteration, k), m.payload.clone());
            }
            (MessageKind::PartialZ, Sender::Group(_)) => partial_z[m.iteration - 1].push(m.payload.clone()),
            (MessageKind::FinalZ, _) => z.push(m.payload.clone()),
            _ => return Err(Error::Transcript(format!("unexpected {:?} from {:?}", m.kind, m.sender))),
        }
    }
    if z.len() != iterations {
        return Err(Error::Transcript(format!("{} FINAL_Z records for {iterations} iterations", z.len())));
    }

    Ok(ObserverView {
        observer,
        n,
        rho: tr.header.rho,
        shape: tr.header.shape.clone(),
        aggregation: tr.header.aggregation.clone(),
        received_y,
        partial_z,
        z,
        own,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::run_aggregation;
    use crate::schedule::{generate_schedule, GroupSchedule, SearchBudget};

    fn inputs(n: usize, dim: usize) -> Vec<ParamVector<f64>> {
        (0..n)
            .map(|k| ParamVector::from_vec((0..dim).map(|j| (k * 3 + j) as f64 * 0.25 - 1.0).collect()).unwrap())
            .collect()
    }

    fn gap4() -> GroupSchedule {
        generate_schedule(9, 3, 5, SearchBudget::default()).unwrap()
    }

    #[test]
    fn matches_engine_bitwise() {
        let ws = inputs(9, 4);
        for cfg in [AdmmConfig::new(1.5, 6), AdmmConfig::new(0.4, 7).grouped(gap4())] {
            let (z, tr) = run_simulation(&ws, &cfg, 77).unwrap();
            let run = run_aggregation(&ws, &cfg, 77).unwrap();
            assert_eq!(z, run.z_final);
            let finals = tr.consensus_sequence();
            assert_eq!(finals.len(), cfg.max_iterations);
            for (f, t) in finals.iter().zip(&run.traces) {
                assert_eq!(**f, t.z);
            }
            tr.verify().unwrap();
        }
    }

    #[test]
    fn grouped_message_counts() {
        let (_, tr) = run_simulation(&inputs(9, 2), &AdmmConfig::new(1.0, 5).grouped(gap4()), 1).unwrap();
        for i in 1..=5 {
            assert_eq!(tr.messages_at(i, MessageKind::Y).count(), 9);
            assert_eq!(tr.messages_at(i, MessageKind::PartialZ).count(), 3);
            assert_eq!(tr.messages_at(i, MessageKind::FinalZ).count(), 1);
        }
        assert!(tr.messages.windows(2).all(|w| w[0].order_key() <= w[1].order_key()));
    }

    #[test]
    fn all_to_all_view_sees_everything() {
        let (_, tr) = run_simulation(&inputs(4, 1), &AdmmConfig::new(1.0, 3), 1).unwrap();
        let view = peer_view(&tr, 2).unwrap();
        assert_eq!(view.received_y.len(), 4 * 3);
        assert_eq!(view.own.peer, 2);
        assert_eq!(view.own.w, tr.peers[2].w);
        assert!(matches!(peer_view(&tr, 4), Err(Error::UnknownPeer { .. })));
    }

    #[test]
    fn grouped_view_sees_target_only_when_cogrouped() {
        let sch = gap4();
        let (_, tr) = run_simulation(&inputs(9, 1), &AdmmConfig::new(1.0, 7).grouped(sch.clone()), 3).unwrap();
        for observer in 0..9 {
            let view = peer_view(&tr, observer).unwrap();
            for target in (0..9).filter(|&t| t != observer) {
                let seen: Vec<usize> = view
                    .received_y
                    .keys()
                    .filter(|(_, k)| *k == target)
                    .map(|(i, _)| *i)
                    .collect();
                assert_eq!(seen, sch.meetings(observer, target, 7));
            }
            assert!(view.partial_z.iter().all(|p| p.len() == 3));
        }
        // Pairs in the first class meet at iterations 1 and 5.
        let first = &sch.classes[0].blocks()[0];
        let (a, b) = (first.members()[0], first.members()[1]);
        assert_eq!(sch.meetings(a, b, 7), vec![1, 5]);
    }

    #[test]
    fn jsonl_roundtrip_and_replay() {
        let ws = inputs(9, 3);
        let (_, tr) = run_simulation(&ws, &AdmmConfig::new(0.9, 4).grouped(gap4()), 9).unwrap();
        let mut buf = Vec::new();
        tr.write_jsonl(&mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.lines().next().unwrap().contains(r#""record":"header""#));
        let back = Transcript::<f64>::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
        back.verify().unwrap();
        let replayed = back.replay().unwrap();
        for (r, f) in replayed.iter().zip(back.consensus_sequence()) {
            assert_eq!(r, f);
        }
    }

    #[test]
    fn tampered_transcript_fails_verification() {
        let (_, mut tr) = run_simulation(&inputs(3, 1), &AdmmConfig::new(1.0, 2), 0).unwrap();
        let y = tr.messages.iter_mut().find(|m| m.kind == MessageKind::Y).unwrap();
        y.payload = y.payload.map("test", |v| v + 1.0).unwrap();
        assert!(tr.verify().is_err());
    }

    #[test]
    fn read_rejects_missing_header() {
        let line = r#"{"record":"peer","peer":0,"w":{"data":[1.0]},"lambda0":{"data":[0.0]}}"#;
        assert!(Transcript::<f64>::read_jsonl(line.as_bytes()).is_err());
    }
}
