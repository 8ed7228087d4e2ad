//! The two protocol roles: a database node holding one masked shard, and the
//! user that runs a read phase followed by a write phase against all nodes.

use std::sync::{Arc, Mutex};
use std::thread;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{
    answer_read, apply_update, decode_read, encode_storage, encode_update, gen_read_query, gen_write_query, CodecError,
    EvalPoints, QueryBlocks, ReadNoise, SelectionPattern, StorageShard, SymbolVector, WriteNoise, WriteQuery,
};
use crate::field::{FieldElement, FieldError, PrimeField};
use crate::harness::{ReferenceModel, TrafficCounts};
use crate::planner::{Layout, RegionPlan};
use crate::transport::{error_code, frame, unframe, Message, NodeLink, Tag, TransportError};

#[derive(Debug, Error)]
pub enum RoleError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("database {db} answered with error code {code}")]
    Node { db: usize, code: u64 },
    #[error("database {db} sent {tag:?}, expected {expected:?}")]
    Unexpected { db: usize, tag: Tag, expected: Tag },
    #[error("invalid configuration: {0}")]
    Config(String),
}

struct PendingWrite {
    round: u32,
    queries: Vec<Option<WriteQuery>>,
    updated: Vec<bool>,
    staged: StorageShard,
}

/// One database: its shard plus a staging copy for the round in flight.
pub struct DatabaseNode {
    index: usize,
    field: PrimeField,
    points: EvalPoints,
    layout: Layout,
    shard: StorageShard,
    next_round: u32,
    pending: Option<PendingWrite>,
}

impl DatabaseNode {
    pub fn new(index: usize, field: PrimeField, points: EvalPoints, layout: Layout, shard: StorageShard) -> Result<Self, RoleError> {
        if index >= points.n_dbs() {
            return Err(RoleError::Config(format!("database index {index} outside 0..{}", points.n_dbs())));
        }
        if shard.len() != layout.padded_length || shard.submodels() != layout.submodels {
            return Err(RoleError::Config("shard does not match layout".into()));
        }
        layout.validate().map_err(|e| RoleError::Config(e.to_string()))?;
        Ok(DatabaseNode { index, field, points, layout, shard, next_round: 1, pending: None })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn shard(&self) -> &StorageShard {
        &self.shard
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn points(&self) -> &EvalPoints {
        &self.points
    }

    pub fn modulus(&self) -> u64 {
        self.field.modulus()
    }

    /// The round id the node accepts next.
    pub fn next_round(&self) -> u32 {
        self.next_round
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    fn region(&self, region: u32) -> Result<&RegionPlan, u64> {
        self.layout.regions.get(region as usize).ok_or(error_code::PROTOCOL)
    }

    fn query(&self, msg: &Message, region: &RegionPlan, ell: usize, gamma: usize) -> Result<QueryBlocks, u64> {
        let rows = msg.payload.iter().map(|&v| FieldElement(v)).collect();
        QueryBlocks::from_rows(region.id, ell, gamma, self.layout.submodels, rows).map_err(|_| error_code::PROTOCOL)
    }

    fn pending(&mut self, round: u32) -> &mut PendingWrite {
        let regions = self.layout.regions.len();
        let shard = &self.shard;
        self.pending.get_or_insert_with(|| PendingWrite {
            round,
            queries: vec![None; regions],
            updated: vec![false; regions],
            staged: shard.clone(),
        })
    }

    /// Handles everything but `INIT_STORAGE`.
    pub fn handle(&mut self, msg: &Message) -> Message {
        let (round, region) = (msg.round, msg.region);
        match self.dispatch(msg) {
            Ok(reply) => reply,
            Err(code) => Message::error(round, region, code),
        }
    }

    fn dispatch(&mut self, msg: &Message) -> Result<Message, u64> {
        if msg.round != self.next_round {
            return Err(error_code::STALE_ROUND);
        }
        let (round, rid) = (msg.round, msg.region);
        match msg.tag {
            Tag::ReadQuery => {
                let region = self.region(rid)?.clone();
                let query = self.query(msg, &region, region.ell_r, region.gamma_r)?;
                let answer = answer_read(&self.field, &self.shard, &query, &region).map_err(|_| error_code::PROTOCOL)?;
                Ok(Message::new(Tag::ReadAnswer, round, rid, answer.values.iter().map(|v| v.0).collect()))
            }
            Tag::WriteQuery => {
                let region = self.region(rid)?.clone();
                let query = self.query(msg, &region, region.ell_w, region.gamma_w)?;
                let pending = self.pending(round);
                if pending.updated[region.id] {
                    return Err(error_code::PROTOCOL);
                }
                pending.queries[region.id] = Some(query);
                Ok(Message::ack(round, rid))
            }
            Tag::UpdateSymbols => {
                let region = self.region(rid)?.clone();
                let field = self.field.clone();
                let pending = self.pending.as_mut().ok_or(error_code::PROTOCOL)?;
                if pending.updated[region.id] {
                    return Err(error_code::PROTOCOL);
                }
                let query = pending.queries[region.id].as_ref().ok_or(error_code::PROTOCOL)?;
                let symbols = SymbolVector { region: region.id, values: msg.payload.iter().map(|&v| FieldElement(v)).collect() };
                apply_update(&field, &mut pending.staged, query, &symbols, &region).map_err(|_| error_code::PROTOCOL)?;
                pending.updated[region.id] = true;
                Ok(Message::ack(round, rid))
            }
            Tag::Commit => {
                if let Some(pending) = &self.pending {
                    if pending.updated.iter().any(|&u| !u) {
                        return Err(error_code::PROTOCOL);
                    }
                }
                if let Some(pending) = self.pending.take() {
                    debug_assert_eq!(pending.round, round);
                    self.shard = pending.staged;
                }
                self.next_round += 1;
                Ok(Message::ack(round, rid))
            }
            Tag::Abort => {
                self.pending = None;
                self.next_round += 1;
                Ok(Message::ack(round, rid))
            }
            _ => Err(error_code::UNEXPECTED),
        }
    }
}

/// Request handler behind a node's channel. Starts empty and is populated by
/// `INIT_STORAGE`.
#[derive(Default)]
pub struct NodeService {
    node: Option<DatabaseNode>,
}

impl NodeService {
    pub fn new() -> Self {
        NodeService::default()
    }

    pub fn shared() -> Arc<Mutex<NodeService>> {
        Arc::new(Mutex::new(NodeService::new()))
    }

    pub fn node(&self) -> Option<&DatabaseNode> {
        self.node.as_ref()
    }

    pub fn handle(&mut self, msg: &Message) -> Message {
        match (msg.tag, &mut self.node) {
            (Tag::InitStorage, _) => match InitStorage::decode(&msg.payload) {
                Ok(init) => match init.into_node() {
                    Ok(node) => {
                        self.node = Some(node);
                        Message::ack(msg.round, msg.region)
                    }
                    Err(_) => Message::error(msg.round, msg.region, error_code::PROTOCOL),
                },
                Err(_) => Message::error(msg.round, msg.region, error_code::MALFORMED),
            },
            (_, None) => Message::error(msg.round, msg.region, error_code::NOT_INITIALIZED),
            (_, Some(node)) => node.handle(msg),
        }
    }

    /// Byte-level entry point shared by all channels. Never panics on input.
    pub fn handle_frame(&mut self, request: &[u8]) -> Vec<u8> {
        let modulus = self.node.as_ref().map(|n| n.modulus());
        let reply = match unframe(request, modulus) {
            Ok(msg) => self.handle(&msg),
            Err(_) => Message::error(0, 0, error_code::MALFORMED),
        };
        frame(&reply, None).expect("replies are well formed")
    }
}

/// Configuration and shard sent to one database at setup.
///
/// Payload words: `q, N, M, L, padded_L, db, R`, then `R` quadruples
/// `(offset, length, ell_r, ell_w)`, then `N` alphas, `y_max`, `y_max` f
/// points, then the shard rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitStorage {
    pub q: u64,
    pub db: usize,
    pub points: EvalPoints,
    pub layout: Layout,
    pub shard: StorageShard,
}

impl InitStorage {
    pub fn encode(&self) -> Vec<u64> {
        let l = &self.layout;
        let mut out = vec![
            self.q,
            l.n_dbs as u64,
            l.submodels as u64,
            l.length as u64,
            l.padded_length as u64,
            self.db as u64,
            l.regions.len() as u64,
        ];
        for r in &l.regions {
            out.extend([r.bit_offset, r.bit_length, r.ell_r, r.ell_w].map(|v| v as u64));
        }
        out.extend(self.points.alphas().iter().map(|v| v.0));
        out.push(self.points.fs().len() as u64);
        out.extend(self.points.fs().iter().map(|v| v.0));
        out.extend(self.shard.data().iter().map(|v| v.0));
        out
    }

    pub fn decode(words: &[u64]) -> Result<Self, RoleError> {
        let bad = |what: &str| RoleError::Config(format!("init payload: {what}"));
        let mut it = words.iter().copied();
        let mut next = |what: &str| it.next().ok_or_else(|| bad(what));
        let small = |v: u64, what: &str| usize::try_from(v).ok().filter(|&v| v <= u32::MAX as usize).ok_or_else(|| bad(what));
        let q = next("q")?;
        let field = PrimeField::new(q)?;
        let n_dbs = small(next("N")?, "N")?;
        let submodels = small(next("M")?, "M")?;
        let length = small(next("L")?, "L")?;
        let padded_length = small(next("padded L")?, "padded L")?;
        let db = small(next("db")?, "db")?;
        let count = small(next("regions")?, "regions")?;
        if count > padded_length.max(1) {
            return Err(bad("region count"));
        }
        let mut regions = Vec::with_capacity(count);
        for id in 0..count {
            let offset = small(next("region")?, "offset")?;
            let len = small(next("region")?, "length")?;
            let ell_r = small(next("region")?, "ell_r")?;
            let ell_w = small(next("region")?, "ell_w")?;
            if ell_r == 0 || ell_w == 0 || ell_r > 1 << 16 || ell_w > 1 << 16 {
                return Err(bad("subpacketization"));
            }
            regions.push(RegionPlan::new(id, offset, len, ell_r, ell_w));
        }
        let mut alphas = Vec::new();
        for _ in 0..n_dbs.min(words.len()) {
            alphas.push(field.try_element(next("alpha")?)?);
        }
        if alphas.len() != n_dbs {
            return Err(bad("alphas"));
        }
        let y = small(next("f count")?, "f count")?;
        let mut fs = Vec::new();
        for _ in 0..y.min(words.len()) {
            fs.push(field.try_element(next("f")?)?);
        }
        if fs.len() != y {
            return Err(bad("f points"));
        }
        let layout = Layout { n_dbs, submodels, length, padded_length, regions };
        layout.validate().map_err(|e| RoleError::Config(e.to_string()))?;
        let rows: Vec<FieldElement> = it.map(|v| field.try_element(v)).collect::<Result<_, _>>()?;
        if Some(rows.len()) != submodels.checked_mul(padded_length) {
            return Err(bad("shard size"));
        }
        let shard = StorageShard::from_rows(db, submodels, rows)?;
        let points = EvalPoints::new(&field, alphas, fs)?;
        Ok(InitStorage { q, db, points, layout, shard })
    }

    fn into_node(self) -> Result<DatabaseNode, RoleError> {
        if self.points.n_dbs() != self.layout.n_dbs || self.points.y_max() < self.layout.y_max() {
            return Err(RoleError::Config("evaluation points do not match layout".into()));
        }
        DatabaseNode::new(self.db, PrimeField::new(self.q)?, self.points, self.layout, self.shard)
    }
}

/// Masks the reference model into one shard per database.
pub fn provision_shards<R: Rng + ?Sized>(
    field: &PrimeField,
    model: &ReferenceModel,
    points: &EvalPoints,
    layout: &Layout,
    rng: &mut R,
) -> Result<Vec<StorageShard>, RoleError> {
    if model.padded_length() != layout.padded_length || model.submodels() != layout.submodels {
        return Err(RoleError::Config("model does not match layout".into()));
    }
    let mut shards: Vec<StorageShard> =
        (0..layout.n_dbs).map(|n| StorageShard::zeros(n, layout.submodels, layout.padded_length)).collect();
    for region in &layout.regions {
        encode_storage(field, model, points, region, rng, &mut shards)?;
    }
    Ok(shards)
}

/// Sends each shard to its database and waits for the acknowledgements.
pub fn init_nodes(
    links: &mut [NodeLink],
    field: &PrimeField,
    points: &EvalPoints,
    layout: &Layout,
    shards: &[StorageShard],
) -> Result<(), RoleError> {
    if links.len() != shards.len() || links.len() != layout.n_dbs {
        return Err(RoleError::Config(format!("{} links, {} shards, N = {}", links.len(), shards.len(), layout.n_dbs)));
    }
    let requests: Vec<Vec<Message>> = shards
        .iter()
        .enumerate()
        .map(|(db, shard)| {
            let init = InitStorage { q: field.modulus(), db, points: points.clone(), layout: layout.clone(), shard: shard.clone() };
            vec![Message::new(Tag::InitStorage, 0, 0, init.encode())]
        })
        .collect();
    let replies = exchange_all(links, requests)?;
    for (db, r) in replies.iter().enumerate() {
        expect(db, &r[0], Tag::Ack)?;
    }
    for link in links.iter_mut() {
        link.set_modulus(field.modulus());
    }
    Ok(())
}

/// Shards currently held by in-process nodes.
pub fn snapshot_shards(services: &[Arc<Mutex<NodeService>>]) -> Option<Vec<StorageShard>> {
    services.iter().map(|s| s.lock().expect("node mutex poisoned").node().map(|n| n.shard().clone())).collect()
}

fn expect(db: usize, msg: &Message, tag: Tag) -> Result<(), RoleError> {
    if msg.tag == Tag::Error {
        return Err(RoleError::Node { db, code: msg.payload.first().copied().unwrap_or(0) });
    }
    if msg.tag != tag {
        return Err(RoleError::Unexpected { db, tag: msg.tag, expected: tag });
    }
    Ok(())
}

/// Sends each link its list of requests, links in parallel and requests in
/// order. A link stops at its first transport failure or error reply.
fn exchange_all(links: &mut [NodeLink], requests: Vec<Vec<Message>>) -> Result<Vec<Vec<Message>>, RoleError> {
    let results: Vec<Result<Vec<Message>, RoleError>> = thread::scope(|scope| {
        let handles: Vec<_> = links
            .iter_mut()
            .zip(requests)
            .map(|(link, reqs)| {
                scope.spawn(move || {
                    let mut replies = Vec::with_capacity(reqs.len());
                    for req in &reqs {
                        let reply = link.call(req)?;
                        let failed = reply.tag == Tag::Error;
                        replies.push(reply);
                        if failed {
                            break;
                        }
                    }
                    Ok(replies)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("link thread panicked")).collect()
    });
    results.into_iter().collect()
}

/// Symbols exchanged with one database in one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DbTraffic {
    pub query_symbols: usize,
    pub answer_symbols: usize,
    pub update_symbols: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RoundTranscript {
    pub round: u32,
    pub per_db: Vec<DbTraffic>,
    pub counts: TrafficCounts,
}

/// What the user obtained and sent in one committed round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundOutcome {
    /// Requested submodel over the padded length, zero where not delivered.
    pub downloaded: Vec<FieldElement>,
    pub delivered: Vec<bool>,
    /// The update as applied: the intended update on selected positions,
    /// zero elsewhere.
    pub uploaded: Vec<FieldElement>,
    pub applied: Vec<bool>,
    pub transcript: RoundTranscript,
}

/// The user: fixed evaluation points and layout, a private submodel choice
/// per round, and a private noise source.
pub struct UserClient<R: Rng> {
    field: PrimeField,
    points: EvalPoints,
    layout: Layout,
    rng: R,
    round: u32,
}

impl<R: Rng> UserClient<R> {
    pub fn new(field: PrimeField, points: EvalPoints, layout: Layout, rng: R) -> Self {
        UserClient { field, points, layout, rng, round: 0 }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Id of the last round started.
    pub fn round(&self) -> u32 {
        self.round
    }

    /// `k` lowest positions of every block in every region.
    pub fn first_k_patterns(&self) -> Vec<SelectionPattern> {
        let base = self.layout.base();
        self.layout.regions.iter().map(|r| SelectionPattern::first_k(r, base)).collect()
    }

    pub fn random_patterns(&mut self) -> Vec<SelectionPattern> {
        let base = self.layout.base();
        let rng = &mut self.rng;
        self.layout.regions.iter().map(|r| SelectionPattern::random_k(r, base, rng)).collect()
    }

    /// Reads submodel `theta` (1-based) under `patterns`, then writes
    /// `update` (padded length) back. Nodes stage the write until every one
    /// has acknowledged it; any failure aborts the round on all nodes.
    pub fn run_round(
        &mut self,
        links: &mut [NodeLink],
        theta: usize,
        patterns: &[SelectionPattern],
        update: &[FieldElement],
    ) -> Result<RoundOutcome, RoleError> {
        self.round += 1;
        let round = self.round;
        match self.try_round(links, round, theta, patterns, update) {
            Ok(outcome) => Ok(outcome),
            Err(e) => {
                let aborts = (0..links.len()).map(|_| vec![Message::new(Tag::Abort, round, 0, Vec::new())]).collect();
                let _ = exchange_all(links, aborts);
                Err(e)
            }
        }
    }

    fn try_round(
        &mut self,
        links: &mut [NodeLink],
        round: u32,
        theta: usize,
        patterns: &[SelectionPattern],
        update: &[FieldElement],
    ) -> Result<RoundOutcome, RoleError> {
        let (f, layout, n_dbs, m) = (&self.field, &self.layout, self.layout.n_dbs, self.layout.submodels);
        if links.len() != n_dbs {
            return Err(RoleError::Config(format!("{} links for {} databases", links.len(), n_dbs)));
        }
        if patterns.len() != layout.regions.len() {
            return Err(RoleError::Config(format!("{} patterns for {} regions", patterns.len(), layout.regions.len())));
        }
        if update.len() != layout.padded_length {
            return Err(RoleError::Config(format!("update has {} values, expected {}", update.len(), layout.padded_length)));
        }
        for (p, r) in patterns.iter().zip(&layout.regions) {
            p.validate(r, layout.base())?;
        }
        let mut update_checked = Vec::with_capacity(update.len());
        for &v in update {
            update_checked.push(f.check(v)?);
        }

        let mut per_db = vec![DbTraffic::default(); n_dbs];

        // read phase
        let read_noise: Vec<ReadNoise> = layout.regions.iter().map(|r| ReadNoise::draw(f, r, m, &mut self.rng)).collect();
        let mut requests = vec![Vec::new(); n_dbs];
        for (n, reqs) in requests.iter_mut().enumerate() {
            for (r, (region, noise)) in layout.regions.iter().zip(&read_noise).enumerate() {
                let q = gen_read_query(f, theta, m, &patterns[r], &self.points, region, n, noise)?;
                per_db[n].query_symbols += q.rows.len();
                reqs.push(Message::new(Tag::ReadQuery, round, r as u32, q.rows.iter().map(|v| v.0).collect()));
            }
        }
        let replies = exchange_all(links, requests)?;
        let mut answers: Vec<Vec<SymbolVector>> = vec![Vec::with_capacity(n_dbs); layout.regions.len()];
        for (db, rs) in replies.iter().enumerate() {
            for (r, reply) in rs.iter().enumerate() {
                expect(db, reply, Tag::ReadAnswer)?;
                per_db[db].answer_symbols += reply.payload.len();
                answers[r].push(SymbolVector { region: r, values: reply.payload.iter().map(|&v| FieldElement(v)).collect() });
            }
            if rs.len() != layout.regions.len() {
                return Err(RoleError::Config(format!("database {db} answered {} of {} regions", rs.len(), layout.regions.len())));
            }
        }
        let mut downloaded = vec![FieldElement::ZERO; layout.padded_length];
        let mut delivered = vec![false; layout.padded_length];
        for (r, region) in layout.regions.iter().enumerate() {
            let decoded = decode_read(f, &answers[r], &patterns[r], &self.points, region)?;
            downloaded[region.bit_offset..region.end()].copy_from_slice(&decoded.values);
            delivered[region.bit_offset..region.end()].copy_from_slice(&decoded.delivered);
        }

        // write phase
        let write_noise: Vec<WriteNoise> = layout.regions.iter().map(|r| WriteNoise::draw(f, r, m, &mut self.rng)).collect();
        let mut requests = vec![Vec::new(); n_dbs];
        for (n, reqs) in requests.iter_mut().enumerate() {
            for (r, (region, noise)) in layout.regions.iter().zip(&write_noise).enumerate() {
                let q = gen_write_query(f, theta, m, &patterns[r], &self.points, region, n, noise)?;
                per_db[n].query_symbols += q.rows.len();
                reqs.push(Message::new(Tag::WriteQuery, round, r as u32, q.rows.iter().map(|v| v.0).collect()));
                let u = encode_update(f, &update_checked[region.bit_offset..region.end()], &patterns[r], &self.points, region, n, noise)?;
                per_db[n].update_symbols += u.values.len();
                reqs.push(Message::new(Tag::UpdateSymbols, round, r as u32, u.values.iter().map(|v| v.0).collect()));
            }
        }
        let replies = exchange_all(links, requests)?;
        for (db, rs) in replies.iter().enumerate() {
            for reply in rs {
                expect(db, reply, Tag::Ack)?;
            }
            if rs.len() != 2 * layout.regions.len() {
                return Err(RoleError::Config(format!("database {db} acknowledged {} of {} writes", rs.len(), 2 * layout.regions.len())));
            }
        }
        let commits = (0..n_dbs).map(|_| vec![Message::new(Tag::Commit, round, 0, Vec::new())]).collect();
        for (db, rs) in exchange_all(links, commits)?.iter().enumerate() {
            expect(db, &rs[0], Tag::Ack)?;
        }

        let mut uploaded = vec![FieldElement::ZERO; layout.padded_length];
        let mut applied = vec![false; layout.padded_length];
        for (region, pattern) in layout.regions.iter().zip(patterns) {
            for t in 0..region.write_subpackets() {
                for &i in &pattern.write[t % region.gamma_w] {
                    let p = region.bit_offset + t * region.ell_w + i - 1;
                    uploaded[p] = update_checked[p];
                    applied[p] = true;
                }
            }
        }
        let counts = TrafficCounts {
            download_symbols: per_db.iter().map(|d| d.answer_symbols).sum(),
            upload_symbols: per_db.iter().map(|d| d.update_symbols).sum(),
            query_symbols: per_db[0].query_symbols,
        };
        Ok(RoundOutcome { downloaded, delivered, uploaded, applied, transcript: RoundTranscript { round, per_db, counts } })
    }
}
