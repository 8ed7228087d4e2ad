//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use pruw_core::codec::{EvalPoints, StorageShard};
use pruw_core::field::{FieldElement, PrimeField};
use pruw_core::harness::{god_decode, ReferenceModel};
use pruw_core::planner::Layout;
use pruw_core::roles::{init_nodes, provision_shards, snapshot_shards, NodeService, UserClient};
use pruw_core::transport::{NodeLink, NodeServer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct Cluster {
    pub field: PrimeField,
    pub points: EvalPoints,
    pub layout: Layout,
    pub links: Vec<NodeLink>,
    pub services: Vec<Arc<Mutex<NodeService>>>,
    pub model: ReferenceModel,
    pub user: UserClient<ChaCha20Rng>,
    pub rng: ChaCha20Rng,
    pub servers: Vec<NodeServer>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    InProcess,
    Socket,
}

/// Provisions a model (nonzero on every position when `full_support`) onto
/// fresh nodes. All randomness derives from `seed`.
pub fn cluster(q: u64, layout: &Layout, seed: u64, full_support: bool, mode: Mode) -> Cluster {
    let field = PrimeField::new(q).unwrap();
    let points = EvalPoints::standard(&field, layout.n_dbs, layout.y_max()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (m, l, pl) = (layout.submodels, layout.length, layout.padded_length);
    let model = if full_support {
        ReferenceModel::random_nonzero(&field, m, l, pl, &mut rng)
    } else {
        ReferenceModel::random(&field, m, l, pl, &mut rng)
    };
    let shards = provision_shards(&field, &model, &points, layout, &mut rng).unwrap();
    let (mut links, services, servers) = match mode {
        Mode::InProcess => {
            let (links, services): (Vec<_>, Vec<_>) = (0..layout.n_dbs).map(NodeLink::in_process).unzip();
            (links, services, Vec::new())
        }
        Mode::Socket => {
            let servers: Vec<NodeServer> = (0..layout.n_dbs).map(|_| NodeServer::bind("127.0.0.1:0").unwrap()).collect();
            let links = servers.iter().enumerate().map(|(n, s)| NodeLink::socket(n, s.addr()).unwrap()).collect();
            let services = servers.iter().map(NodeServer::service).collect();
            (links, services, servers)
        }
    };
    init_nodes(&mut links, &field, &points, layout, &shards).unwrap();
    let user = UserClient::new(field.clone(), points.clone(), layout.clone(), ChaCha20Rng::seed_from_u64(rng.gen()));
    Cluster { field, points, layout: layout.clone(), links, services, model, user, rng, servers }
}

impl Cluster {
    pub fn shards(&self) -> Vec<StorageShard> {
        snapshot_shards(&self.services).unwrap()
    }

    pub fn stored(&self) -> ReferenceModel {
        god_decode(&self.field, &self.shards(), &self.points, &self.layout).unwrap()
    }

    /// Update that is nonzero on every real position, zero on padding.
    pub fn nonzero_update(&mut self) -> Vec<FieldElement> {
        let q = self.field.modulus();
        let mut u: Vec<FieldElement> = (0..self.layout.length).map(|_| FieldElement(self.rng.gen_range(1..q))).collect();
        u.resize(self.layout.padded_length, FieldElement::ZERO);
        u
    }
}
