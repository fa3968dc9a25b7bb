//! Simplified permissioned multi-channel ledger.
//!
//! Replaces the centralized aggregator: registered identities sign their
//! submissions, an endorsement check validates shape and signature, a
//! deterministic orderer assigns a total order, and committed blocks form
//! a SHA-256 hash chain per channel. The world state tracks the latest
//! global model and the count of committed-but-unmerged local blocks.
//!
//! Canonical block encoding (all integers little-endian), in this order:
//! type tag u8, channel_id (u32 len + UTF-8), round u64, creator 16 bytes,
//! parent_hash 32 bytes, n_k (u8 presence + u64), payload (u32 len + f64
//! values in flattening order), merge_meta (u8 presence + body), timestamp
//! u64. The block hash is SHA-256 of this encoding. The creator signature
//! covers the creator-owned fields (everything except parent_hash and
//! timestamp, which the committer assigns); tampering with those two is
//! caught by the hash links and the timestamp-equals-index rule.

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::agg::DefensePolicy;
use crate::dp::DpPolicy;
use crate::error::{Error, Result};
use crate::nn::{GradientVector, ModelParams, ModelSpec};
use crate::rng::substream;

/// Opaque 16-byte participant identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub [u8; 16]);

impl std::fmt::Display for ClientId {
    fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// A registered participant: id plus its signing keypair.
#[derive(Debug, Clone)]
pub struct Identity {
    id: ClientId,
    signing: SigningKey,
}

impl Identity {
    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        self.signing.sign(message)
    }
}

/// Kind of ledger record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockType {
    Genesis,
    Local,
    Global,
}

impl BlockType {
    fn tag(self) -> u8 {
        match self {
            BlockType::Genesis => 0,
            BlockType::Local => 1,
            BlockType::Global => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BlockType::Genesis),
            1 => Some(BlockType::Local),
            2 => Some(BlockType::Global),
            _ => None,
        }
    }
}

/// What a merge decided: which local blocks went in, which were rejected,
/// the anomaly scores, and the sybil weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeMeta {
    /// (client, round) keys of the aggregated local blocks.
    pub selected: Vec<(ClientId, u64)>,
    /// (client, round) keys rejected by Multi-KRUM.
    pub rejected: Vec<(ClientId, u64)>,
    /// Multi-KRUM scores, empty when the filter is off.
    pub scores: Vec<(ClientId, u64, f64)>,
    /// FoolsGold weights, empty when the defense is off.
    pub fg_weights: Vec<(ClientId, f64)>,
}

/// One immutable ledger record.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub block_type: BlockType,
    pub channel_id: String,
    pub round: u64,
    pub creator: ClientId,
    pub parent_hash: [u8; 32],
    /// Local blocks carry the update delta; genesis and global blocks
    /// carry the full model values.
    pub payload: GradientVector,
    pub n_k: Option<u64>,
    pub merge_meta: Option<MergeMeta>,
    /// Logical commit counter; equals the block's chain index.
    pub timestamp: u64,
    pub signature: Signature,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_merge_meta(buf: &mut Vec<u8>, meta: &MergeMeta) {
    buf.extend_from_slice(&(meta.selected.len() as u32).to_le_bytes());
    for (id, round) in &meta.selected {
        buf.extend_from_slice(&id.0);
        buf.extend_from_slice(&round.to_le_bytes());
    }
    buf.extend_from_slice(&(meta.rejected.len() as u32).to_le_bytes());
    for (id, round) in &meta.rejected {
        buf.extend_from_slice(&id.0);
        buf.extend_from_slice(&round.to_le_bytes());
    }
    buf.extend_from_slice(&(meta.scores.len() as u32).to_le_bytes());
    for (id, round, score) in &meta.scores {
        buf.extend_from_slice(&id.0);
        buf.extend_from_slice(&round.to_le_bytes());
        buf.extend_from_slice(&score.to_le_bytes());
    }
    buf.extend_from_slice(&(meta.fg_weights.len() as u32).to_le_bytes());
    for (id, w) in &meta.fg_weights {
        buf.extend_from_slice(&id.0);
        buf.extend_from_slice(&w.to_le_bytes());
    }
}

impl Block {
    /// The creator-owned fields the signature covers: everything except
    /// parent_hash and timestamp, with a domain-separation prefix.
    pub fn signed_digest(
        block_type: BlockType,
        channel_id: &str,
        round: u64,
        creator: ClientId,
        n_k: Option<u64>,
        payload: &GradientVector,
        merge_meta: Option<&MergeMeta>,
    ) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + payload.len() * 8);
        buf.extend_from_slice(b"BEAS-BLK1");
        buf.push(block_type.tag());
        put_str(&mut buf, channel_id);
        buf.extend_from_slice(&round.to_le_bytes());
        buf.extend_from_slice(&creator.0);
        match n_k {
            Some(v) => {
                buf.push(1);
                buf.extend_from_slice(&v.to_le_bytes());
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&0u64.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        for v in payload.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match merge_meta {
            Some(meta) => {
                buf.push(1);
                put_merge_meta(&mut buf, meta);
            }
            None => buf.push(0),
        }
        buf
    }

    fn own_signed_digest(&self) -> Vec<u8> {
        Self::signed_digest(
            self.block_type,
            &self.channel_id,
            self.round,
            self.creator,
            self.n_k,
            &self.payload,
            self.merge_meta.as_ref(),
        )
    }

    /// Canonical encoding: the byte string that is hashed and persisted.
    pub fn canonical_encoding(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(96 + self.payload.len() * 8);
        buf.push(self.block_type.tag());
        put_str(&mut buf, &self.channel_id);
        buf.extend_from_slice(&self.round.to_le_bytes());
        buf.extend_from_slice(&self.creator.0);
        buf.extend_from_slice(&self.parent_hash);
        match self.n_k {
            Some(v) => {
                buf.push(1);
                buf.extend_from_slice(&v.to_le_bytes());
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&0u64.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        for v in self.payload.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match &self.merge_meta {
            Some(meta) => {
                buf.push(1);
                put_merge_meta(&mut buf, meta);
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&self.timestamp.to_le_bytes());
        buf
    }

    /// SHA-256 of the canonical encoding.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_encoding());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

/// Training hyperparameters attached to a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    /// Merge threshold t: queued local blocks needed to trigger a merge.
    pub merge_threshold: usize,
    /// Cluster size c: per-round cap on training examples per client.
    pub cluster_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dp: DpPolicy,
    pub defense: DefensePolicy,
}

/// Latest aggregated model plus the committed-but-unmerged local count.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub global: ModelParams,
    pub queued_local_blocks: usize,
}

/// A pending, endorsed submission waiting for the orderer.
#[derive(Debug, Clone)]
struct PendingBlock {
    round: u64,
    creator: ClientId,
    n_k: u64,
    update: GradientVector,
    seq: u64,
    signature: Signature,
}

/// A client-signed local-block submission.
#[derive(Debug, Clone)]
pub struct LocalSubmission {
    pub round: u64,
    pub creator: ClientId,
    pub n_k: u64,
    pub update: GradientVector,
    pub signature: Signature,
}

/// Build and sign a local-block submission for a channel.
pub fn sign_local_submission(
    identity: &Identity,
    channel_id: &str,
    round: u64,
    n_k: u64,
    update: GradientVector,
) -> LocalSubmission {
    let digest = Block::signed_digest(
        BlockType::Local,
        channel_id,
        round,
        identity.id(),
        Some(n_k),
        &update,
        None,
    );
    LocalSubmission {
        round,
        creator: identity.id(),
        n_k,
        update,
        signature: identity.sign(&digest),
    }
}

/// Outcome of a chain audit.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainAudit {
    Ok,
    Violation { index: usize, reason: String },
}

impl ChainAudit {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainAudit::Ok)
    }
}

/// One FL task: model architecture, hyperparameters, an append-only block
/// chain, and the world state.
#[derive(Debug, Clone)]
pub struct Channel {
    channel_id: String,
    model_spec: ModelSpec,
    params: ChannelParams,
    chain: Vec<Block>,
    pending: Vec<PendingBlock>,
    next_seq: u64,
    world: WorldState,
}

impl Channel {
    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.model_spec
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn world_state(&self) -> &WorldState {
        &self.world
    }

    pub fn head_hash(&self) -> [u8; 32] {
        self.chain.last().expect("chain has genesis").hash()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Most recent genesis-or-global block.
    pub fn latest_global(&self) -> &Block {
        self.chain
            .iter()
            .rev()
            .find(|b| matches!(b.block_type, BlockType::Genesis | BlockType::Global))
            .expect("chain has genesis")
    }

    /// Committed local blocks newer than the latest global block.
    pub fn locals_since_last_global(&self) -> Vec<&Block> {
        let last_global = self
            .chain
            .iter()
            .rposition(|b| matches!(b.block_type, BlockType::Genesis | BlockType::Global))
            .expect("chain has genesis");
        self.chain[last_global + 1..]
            .iter()
            .filter(|b| b.block_type == BlockType::Local)
            .collect()
    }
}

/// Verify hash links, signatures, and commit counters over a block list.
/// Reports the first violating index; tampering anywhere in a committed
/// block trips exactly one of the checks.
pub fn verify_blocks(
    blocks: &[Block],
    registry: &BTreeMap<ClientId, VerifyingKey>,
) -> ChainAudit {
    for (i, block) in blocks.iter().enumerate() {
        if i == 0 {
            if block.block_type != BlockType::Genesis {
                return ChainAudit::Violation {
                    index: 0,
                    reason: "first block is not genesis".into(),
                };
            }
            if block.parent_hash != [0u8; 32] {
                return ChainAudit::Violation {
                    index: 0,
                    reason: "genesis parent hash is not zero".into(),
                };
            }
        } else {
            if block.block_type == BlockType::Genesis {
                return ChainAudit::Violation {
                    index: i,
                    reason: "genesis block after position 0".into(),
                };
            }
            if block.parent_hash != blocks[i - 1].hash() {
                return ChainAudit::Violation {
                    index: i,
                    reason: "parent hash does not match predecessor".into(),
                };
            }
        }
        if block.timestamp != i as u64 {
            return ChainAudit::Violation {
                index: i,
                reason: format!("timestamp {} != chain index {i}", block.timestamp),
            };
        }
        let Some(key) = registry.get(&block.creator) else {
            return ChainAudit::Violation {
                index: i,
                reason: format!("creator {} not in registry", block.creator),
            };
        };
        if key.verify(&block.own_signed_digest(), &block.signature).is_err() {
            return ChainAudit::Violation {
                index: i,
                reason: "invalid creator signature".into(),
            };
        }
    }
    ChainAudit::Ok
}

/// The simulated permissioned network: membership registry, channels, and
/// the ordering/merge authority identity.
pub struct Network {
    registry: BTreeMap<ClientId, VerifyingKey>,
    channels: BTreeMap<String, Channel>,
    authority: Identity,
    id_rng: ChaCha12Rng,
}

impl Network {
    /// A fresh network; the seed drives identity generation.
    pub fn new(seed: u64) -> Self {
        let mut id_rng = substream(seed, "network-identity", 0);
        let authority = Self::make_identity(&mut id_rng);
        let mut registry = BTreeMap::new();
        registry.insert(authority.id(), authority.verifying_key());
        Self {
            registry,
            channels: BTreeMap::new(),
            authority,
            id_rng,
        }
    }

    fn make_identity(rng: &mut ChaCha12Rng) -> Identity {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Identity {
            id: ClientId(id),
            signing: SigningKey::from_bytes(&key),
        }
    }

    /// Mint a fresh keypair and record it in the membership registry.
    pub fn register_identity(&mut self) -> Identity {
        loop {
            let identity = Self::make_identity(&mut self.id_rng);
            if !self.registry.contains_key(&identity.id()) {
                self.registry.insert(identity.id(), identity.verifying_key());
                return identity;
            }
        }
    }

    pub fn registry(&self) -> &BTreeMap<ClientId, VerifyingKey> {
        &self.registry
    }

    pub fn registry_len(&self) -> usize {
        self.registry.len()
    }

    pub fn authority_id(&self) -> ClientId {
        self.authority.id()
    }

    pub fn channel(&self, channel_id: &str) -> Result<&Channel> {
        self.channels
            .get(channel_id)
            .ok_or_else(|| Error::UnknownChannel(channel_id.into()))
    }

    /// Open a channel: validates the genesis model against the spec and
    /// commits the creator-signed genesis block.
    pub fn create_channel(
        &mut self,
        channel_id: &str,
        model_spec: ModelSpec,
        params: ChannelParams,
        creator: &Identity,
        genesis_params: ModelParams,
    ) -> Result<()> {
        if self.channels.contains_key(channel_id) {
            return Err(Error::DuplicateChannel(channel_id.into()));
        }
        if !self.registry.contains_key(&creator.id()) {
            return Err(Error::UnknownIdentity(creator.id().to_string()));
        }
        if genesis_params.spec() != &model_spec {
            return Err(Error::FingerprintMismatch {
                expected: model_spec.fingerprint().to_string(),
                actual: genesis_params.fingerprint().to_string(),
            });
        }
        let payload = GradientVector::new(
            genesis_params.values().to_vec(),
            model_spec.fingerprint(),
        )?;
        let digest = Block::signed_digest(
            BlockType::Genesis,
            channel_id,
            0,
            creator.id(),
            None,
            &payload,
            None,
        );
        let genesis = Block {
            block_type: BlockType::Genesis,
            channel_id: channel_id.to_string(),
            round: 0,
            creator: creator.id(),
            parent_hash: [0u8; 32],
            payload,
            n_k: None,
            merge_meta: None,
            timestamp: 0,
            signature: creator.sign(&digest),
        };
        let channel = Channel {
            channel_id: channel_id.to_string(),
            model_spec,
            params,
            chain: vec![genesis],
            pending: Vec::new(),
            next_seq: 0,
            world: WorldState {
                global: genesis_params,
                queued_local_blocks: 0,
            },
        };
        self.channels.insert(channel_id.to_string(), channel);
        Ok(())
    }

    /// Endorse a local-block submission and put it in the ordering queue.
    ///
    /// Endorsement = known creator + valid signature + matching shape.
    pub fn submit_local_block(
        &mut self,
        channel_id: &str,
        submission: LocalSubmission,
    ) -> Result<()> {
        let channel = self
            .channels
            .get_mut(channel_id)
            .ok_or_else(|| Error::UnknownChannel(channel_id.into()))?;
        let Some(key) = self.registry.get(&submission.creator) else {
            return Err(Error::Endorsement(format!(
                "creator {} is not registered",
                submission.creator
            )));
        };
        if submission.update.fingerprint() != channel.model_spec.fingerprint() {
            return Err(Error::Endorsement(format!(
                "update fingerprint {} does not match channel spec {}",
                submission.update.fingerprint(),
                channel.model_spec.fingerprint()
            )));
        }
        if submission.update.len() != channel.model_spec.param_count() {
            return Err(Error::Endorsement(format!(
                "update length {} does not match parameter count {}",
                submission.update.len(),
                channel.model_spec.param_count()
            )));
        }
        if submission.n_k == 0 {
            return Err(Error::Endorsement("n_k claim must be >= 1".into()));
        }
        let digest = Block::signed_digest(
            BlockType::Local,
            channel_id,
            submission.round,
            submission.creator,
            Some(submission.n_k),
            &submission.update,
            None,
        );
        if key.verify(&digest, &submission.signature).is_err() {
            return Err(Error::Endorsement("invalid submission signature".into()));
        }
        let dup = channel
            .pending
            .iter()
            .map(|p| (p.creator, p.round))
            .chain(
                channel
                    .chain
                    .iter()
                    .filter(|b| b.block_type == BlockType::Local)
                    .map(|b| (b.creator, b.round)),
            )
            .any(|key| key == (submission.creator, submission.round));
        if dup {
            return Err(Error::Endorsement(format!(
                "duplicate submission from {} for round {}",
                submission.creator, submission.round
            )));
        }
        let seq = channel.next_seq;
        channel.next_seq += 1;
        channel.pending.push(PendingBlock {
            round: submission.round,
            creator: submission.creator,
            n_k: submission.n_k,
            update: submission.update,
            seq,
            signature: submission.signature,
        });
        Ok(())
    }

    /// Drain the ordering queue in the deterministic total order
    /// (round, creator, submission counter) and append the blocks.
    pub fn order_and_commit(&mut self, channel_id: &str) -> Result<usize> {
        let channel = self
            .channels
            .get_mut(channel_id)
            .ok_or_else(|| Error::UnknownChannel(channel_id.into()))?;
        let mut pending = std::mem::take(&mut channel.pending);
        pending.sort_by_key(|p| (p.round, p.creator, p.seq));
        let count = pending.len();
        for p in pending {
            let parent_hash = channel.head_hash();
            let timestamp = channel.chain.len() as u64;
            channel.chain.push(Block {
                block_type: BlockType::Local,
                channel_id: channel_id.to_string(),
                round: p.round,
                creator: p.creator,
                parent_hash,
                payload: p.update,
                n_k: Some(p.n_k),
                merge_meta: None,
                timestamp,
                signature: p.signature,
            });
            channel.world.queued_local_blocks += 1;
        }
        Ok(count)
    }

    /// Commit an authority-signed global block and reset the merge queue.
    pub fn commit_global_block(
        &mut self,
        channel_id: &str,
        round: u64,
        global: ModelParams,
        merge_meta: MergeMeta,
    ) -> Result<[u8; 32]> {
        let authority = self.authority.id();
        let channel = self
            .channels
            .get_mut(channel_id)
            .ok_or_else(|| Error::UnknownChannel(channel_id.into()))?;
        if global.spec() != &channel.model_spec {
            return Err(Error::FingerprintMismatch {
                expected: channel.model_spec.fingerprint().to_string(),
                actual: global.fingerprint().to_string(),
            });
        }
        let payload =
            GradientVector::new(global.values().to_vec(), channel.model_spec.fingerprint())?;
        let digest = Block::signed_digest(
            BlockType::Global,
            channel_id,
            round,
            authority,
            None,
            &payload,
            Some(&merge_meta),
        );
        let parent_hash = channel.head_hash();
        let timestamp = channel.chain.len() as u64;
        let block = Block {
            block_type: BlockType::Global,
            channel_id: channel_id.to_string(),
            round,
            creator: authority,
            parent_hash,
            payload,
            n_k: None,
            merge_meta: Some(merge_meta),
            timestamp,
            signature: self.authority.sign(&digest),
        };
        let hash = block.hash();
        channel.chain.push(block);
        channel.world.global = global;
        channel.world.queued_local_blocks = 0;
        Ok(hash)
    }

    /// Audit one channel's chain.
    pub fn verify_chain(&self, channel_id: &str) -> Result<ChainAudit> {
        let channel = self.channel(channel_id)?;
        Ok(verify_blocks(&channel.chain, &self.registry))
    }

    /// Persist a channel in the ledger file format.
    pub fn save_channel(&self, channel_id: &str, path: &std::path::Path) -> Result<()> {
        let channel = self.channel(channel_id)?;
        std::fs::write(path, encode_channel_file(channel, &self.registry))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Channel persistence.
//
// Layout: magic "BEAS", format version u16, channel descriptor (channel id,
// model spec, hyperparameters), identity registry, then length-prefixed
// canonical block encodings (each followed by its 64-byte signature) in
// chain order.
// ---------------------------------------------------------------------------

pub const LEDGER_MAGIC: &[u8; 4] = b"BEAS";
pub const LEDGER_FORMAT_VERSION: u16 = 1;

fn encode_dp(buf: &mut Vec<u8>, dp: &DpPolicy) {
    match *dp {
        DpPolicy::None => {
            buf.push(0);
            buf.extend_from_slice(&0f64.to_le_bytes());
        }
        DpPolicy::GaussianNoise { sigma } => {
            buf.push(1);
            buf.extend_from_slice(&sigma.to_le_bytes());
        }
        DpPolicy::ValueClip { clip_bound } => {
            buf.push(2);
            buf.extend_from_slice(&clip_bound.to_le_bytes());
        }
        DpPolicy::NormClip { clip_bound } => {
            buf.push(3);
            buf.extend_from_slice(&clip_bound.to_le_bytes());
        }
        DpPolicy::Prune { sparsity } => {
            buf.push(4);
            buf.extend_from_slice(&sparsity.to_le_bytes());
        }
    }
}

/// Serialize a channel plus the registry needed to re-verify it.
pub fn encode_channel_file(
    channel: &Channel,
    registry: &BTreeMap<ClientId, VerifyingKey>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(LEDGER_MAGIC);
    buf.extend_from_slice(&LEDGER_FORMAT_VERSION.to_le_bytes());

    put_str(&mut buf, &channel.channel_id);
    let sizes = channel.model_spec.layer_sizes();
    buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &w in sizes {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.push(0); // activation tag: relu

    let p = &channel.params;
    buf.extend_from_slice(&(p.merge_threshold as u64).to_le_bytes());
    buf.extend_from_slice(&(p.cluster_size as u64).to_le_bytes());
    buf.extend_from_slice(&(p.epochs as u64).to_le_bytes());
    buf.extend_from_slice(&p.lr.to_le_bytes());
    buf.extend_from_slice(&(p.batch_size as u64).to_le_bytes());
    encode_dp(&mut buf, &p.dp);
    let d = &p.defense;
    buf.push(d.use_multikrum as u8);
    buf.extend_from_slice(&(d.f as u64).to_le_bytes());
    buf.push(d.use_foolsgold as u8);
    buf.extend_from_slice(&(d.fg_history_rounds as u64).to_le_bytes());
    buf.extend_from_slice(&d.fg_kappa.to_le_bytes());
    buf.extend_from_slice(&d.n_k_cap.to_le_bytes());

    buf.extend_from_slice(&(registry.len() as u32).to_le_bytes());
    for (id, key) in registry {
        buf.extend_from_slice(&id.0);
        buf.extend_from_slice(key.as_bytes());
    }

    buf.extend_from_slice(&(channel.chain.len() as u32).to_le_bytes());
    for block in &channel.chain {
        let enc = block.canonical_encoding();
        let sig = block.signature.to_bytes();
        buf.extend_from_slice(&((enc.len() + sig.len()) as u32).to_le_bytes());
        buf.extend_from_slice(&enc);
        buf.extend_from_slice(&sig);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptFile {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!(
                "unexpected end of file at offset {} (wanted {n} bytes)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > self.bytes.len() - self.pos {
            return Err(self.corrupt("string length exceeds file size"));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| self.corrupt("string is not valid UTF-8"))
    }

    fn client_id(&mut self) -> Result<ClientId> {
        Ok(ClientId(self.take(16)?.try_into().unwrap()))
    }
}

fn decode_dp(r: &mut Reader) -> Result<DpPolicy> {
    let tag = r.u8()?;
    let param = r.f64()?;
    Ok(match tag {
        0 => DpPolicy::None,
        1 => DpPolicy::GaussianNoise { sigma: param },
        2 => DpPolicy::ValueClip { clip_bound: param },
        3 => DpPolicy::NormClip { clip_bound: param },
        4 => DpPolicy::Prune { sparsity: param },
        t => return Err(r.corrupt(format!("unknown dp policy tag {t}"))),
    })
}

fn decode_merge_meta(r: &mut Reader) -> Result<MergeMeta> {
    let mut meta = MergeMeta::default();
    let n = r.u32()? as usize;
    for _ in 0..n {
        meta.selected.push((r.client_id()?, r.u64()?));
    }
    let n = r.u32()? as usize;
    for _ in 0..n {
        meta.rejected.push((r.client_id()?, r.u64()?));
    }
    let n = r.u32()? as usize;
    for _ in 0..n {
        meta.scores.push((r.client_id()?, r.u64()?, r.f64()?));
    }
    let n = r.u32()? as usize;
    for _ in 0..n {
        meta.fg_weights.push((r.client_id()?, r.f64()?));
    }
    Ok(meta)
}

fn decode_block(r: &mut Reader, spec: &ModelSpec) -> Result<Block> {
    let tag = r.u8()?;
    let block_type = BlockType::from_tag(tag)
        .ok_or_else(|| r.corrupt(format!("unknown block type tag {tag}")))?;
    let channel_id = r.string()?;
    let round = r.u64()?;
    let creator = r.client_id()?;
    let parent_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let has_nk = r.u8()? != 0;
    let nk_raw = r.u64()?;
    let n_k = has_nk.then_some(nk_raw);
    let len = r.u32()? as usize;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(r.f64()?);
    }
    let payload = GradientVector::new(values, spec.fingerprint()).map_err(|e| Error::CorruptFile {
        path: r.path.to_string(),
        reason: format!("bad payload: {e}"),
    })?;
    let merge_meta = if r.u8()? != 0 {
        Some(decode_merge_meta(r)?)
    } else {
        None
    };
    let timestamp = r.u64()?;
    Ok(Block {
        block_type,
        channel_id,
        round,
        creator,
        parent_hash,
        payload,
        n_k,
        merge_meta,
        timestamp,
    signature: Signature::from_bytes(r.take(64)?.try_into().unwrap()),
    })
}

/// A channel reloaded from disk, with the registry needed to verify it.
pub struct LoadedLedger {
    pub channel: Channel,
    pub registry: BTreeMap<ClientId, VerifyingKey>,
}

impl LoadedLedger {
    pub fn verify(&self) -> ChainAudit {
        verify_blocks(self.channel.chain(), &self.registry)
    }
}

/// Byte offset where the block records begin, for tamper tests and the
/// inspect tooling.
pub fn block_region_offset(bytes: &[u8], path: &str) -> Result<usize> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != LEDGER_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != LEDGER_FORMAT_VERSION {
        return Err(r.corrupt(format!("unsupported format version {version}")));
    }
    r.string()?; // channel id
    let n_layers = r.u32()? as usize;
    for _ in 0..n_layers {
        r.u32()?;
    }
    r.u8()?; // activation
    r.u64()?;
    r.u64()?;
    r.u64()?;
    r.f64()?;
    r.u64()?;
    decode_dp(&mut r)?;
    r.u8()?;
    r.u64()?;
    r.u8()?;
    r.u64()?;
    r.f64()?;
    r.u64()?;
    let n_ids = r.u32()? as usize;
    for _ in 0..n_ids {
        r.take(16 + 32)?;
    }
    r.u32()?; // block count
    Ok(r.pos)
}

/// Reload a channel file; the inverse of [`Network::save_channel`].
///
/// The world state is rebuilt by replaying the chain's global blocks.
pub fn load_channel_file(path: &std::path::Path) -> Result<LoadedLedger> {
    let bytes = std::fs::read(path)?;
    let path_str = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &path_str,
    };
    let magic = r.take(4)?;
    if magic != LEDGER_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != LEDGER_FORMAT_VERSION {
        return Err(r.corrupt(format!("unsupported format version {version}")));
    }
    let channel_id = r.string()?;
    let n_layers = r.u32()? as usize;
    if n_layers < 2 || n_layers > 1024 {
        return Err(r.corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut sizes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        sizes.push(r.u32()? as usize);
    }
    let act_tag = r.u8()?;
    if act_tag != 0 {
        return Err(r.corrupt(format!("unknown activation tag {act_tag}")));
    }
    let model_spec = ModelSpec::new(sizes).map_err(|e| Error::CorruptFile {
        path: path_str.clone(),
        reason: format!("bad model spec: {e}"),
    })?;
    let merge_threshold = r.u64()? as usize;
    let cluster_size = r.u64()? as usize;
    let epochs = r.u64()? as usize;
    let lr = r.f64()?;
    let batch_size = r.u64()? as usize;
    let dp = decode_dp(&mut r)?;
    let use_multikrum = r.u8()? != 0;
    let f = r.u64()? as usize;
    let use_foolsgold = r.u8()? != 0;
    let fg_history_rounds = r.u64()? as usize;
    let fg_kappa = r.f64()?;
    let n_k_cap = r.u64()?;
    let params = ChannelParams {
        merge_threshold,
        cluster_size,
        epochs,
        lr,
        batch_size,
        dp,
        defense: DefensePolicy {
            use_multikrum,
            f,
            use_foolsgold,
            fg_history_rounds,
            fg_kappa,
            n_k_cap,
        },
    };

    let n_ids = r.u32()? as usize;
    let mut registry = BTreeMap::new();
    for _ in 0..n_ids {
        let id = r.client_id()?;
        let key_bytes: [u8; 32] = r.take(32)?.try_into().unwrap();
        let key = VerifyingKey::from_bytes(&key_bytes)
            .map_err(|_| r.corrupt(format!("invalid verify key for {id}")))?;
        registry.insert(id, key);
    }

    let n_blocks = r.u32()? as usize;
    let mut chain = Vec::with_capacity(n_blocks.min(1 << 20));
    for i in 0..n_blocks {
        let len = r.u32()? as usize;
        let start = r.pos;
        if len > bytes.len() - start {
            return Err(r.corrupt(format!("block {i} length {len} exceeds file size")));
        }
        let block = decode_block(&mut r, &model_spec)?;
        if r.pos != start + len {
            return Err(r.corrupt(format!(
                "block {i} length prefix {len} does not match encoding ({} read)",
                r.pos - start
            )));
        }
        chain.push(block);
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes after last block"));
    }
    if chain.is_empty() {
        return Err(r.corrupt("chain has no genesis block"));
    }

    // Rebuild world state by replay.
    let mut global_values: Option<Vec<f64>> = None;
    let mut queued = 0usize;
    for block in &chain {
        match block.block_type {
            BlockType::Genesis | BlockType::Global => {
                global_values = Some(block.payload.values().to_vec());
                queued = 0;
            }
            BlockType::Local => queued += 1,
        }
    }
    let global = ModelParams::new(
        model_spec.clone(),
        global_values.ok_or_else(|| r.corrupt("no global block in chain"))?,
    )
    .map_err(|e| Error::CorruptFile {
        path: path_str.clone(),
        reason: format!("bad global payload: {e}"),
    })?;

    let next_seq = chain.len() as u64;
    Ok(LoadedLedger {
        channel: Channel {
            channel_id,
            model_spec,
            params,
            chain,
            pending: Vec::new(),
            next_seq,
            world: WorldState {
                global,
                queued_local_blocks: queued,
            },
        },
        registry,
    })
}
