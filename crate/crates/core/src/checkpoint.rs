//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CFCK" | version u32
//! n_meta u32 | n_meta × (key str, value str)
//! n_tensor u32 | n_tensor × (name str, rows u64, cols u64, rows·cols × f64)
//! ```
//!
//! A `str` is a `u32` byte length followed by UTF-8. Values are stored as raw
//! IEEE-754 bits, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::client::ClientState;
use crate::error::{Error, Result};
use crate::federation::{EvalRecord, RoundStats, TrainConfig, TrainedSystem};
use crate::model::{ClientModel, MetaAttributeNetwork};
use crate::nn::{Activation, DenseMatrix, Layer, MlpParams};
use crate::server::ServerState;

const MAGIC: &[u8; 4] = b"CFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, DenseMatrix>,
}

fn corrupt(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    read_array::<4>(input).map(u32::from_le_bytes)
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    read_array::<8>(input).map(u64::from_le_bytes)
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let len = read_u32(input)? as usize;
    let mut buf = vec![0u8; len];
    input
        .read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|_| corrupt("string is not UTF-8"))
}

impl Checkpoint {
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        for (k, v) in &self.metadata {
            write_str(&mut out, k)?;
            write_str(&mut out, v)?;
        }
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, m) in &self.tensors {
            write_str(&mut out, name)?;
            out.write_all(&(m.rows() as u64).to_le_bytes())?;
            out.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        if &read_array::<4>(&mut input)? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..read_u32(&mut input)? {
            let k = read_str(&mut input)?;
            let v = read_str(&mut input)?;
            ck.metadata.insert(k, v);
        }
        for _ in 0..read_u32(&mut input)? {
            let name = read_str(&mut input)?;
            let rows = read_u64(&mut input)? as usize;
            let cols = read_u64(&mut input)? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| corrupt(format!("tensor `{name}` shape overflows")))?;
            let mut bytes = vec![0u8; len * 8];
            input
                .read_exact(&mut bytes)
                .map_err(|e| corrupt(format!("tensor `{name}` truncated: {e}")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ck.tensors.insert(name, DenseMatrix::from_vec(rows, cols, values)?);
        }
        let mut probe = [0u8; 1];
        if input.read(&mut probe).map_err(|e| corrupt(e.to_string()))? != 0 {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing metadata `{key}`")))
    }

    fn tensor(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))
    }

    fn put_mlp(&mut self, prefix: &str, params: &MlpParams) {
        let tags: Vec<String> = params.layers().iter().map(|l| l.activation.tag().to_string()).collect();
        self.metadata.insert(format!("{prefix}/activations"), tags.join(","));
        for (i, layer) in params.layers().iter().enumerate() {
            self.tensors.insert(format!("{prefix}/{i}/weight"), layer.weight.clone());
            let bias = DenseMatrix::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("bias row");
            self.tensors.insert(format!("{prefix}/{i}/bias"), bias);
        }
    }

    fn take_mlp(&self, prefix: &str) -> Result<MlpParams> {
        let tags = self.meta(&format!("{prefix}/activations"))?;
        let layers = tags
            .split(',')
            .enumerate()
            .map(|(i, tag)| {
                let activation = tag
                    .parse::<u8>()
                    .ok()
                    .and_then(Activation::from_tag)
                    .ok_or_else(|| corrupt(format!("bad activation tag `{tag}` in `{prefix}`")))?;
                Ok(Layer {
                    weight: self.tensor(&format!("{prefix}/{i}/weight"))?.clone(),
                    bias: self.tensor(&format!("{prefix}/{i}/bias"))?.as_slice().to_vec(),
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers).map_err(|e| corrupt(format!("`{prefix}`: {e}")))
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn from_json<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_str(ck.meta(key)?).map_err(|e| corrupt(format!("metadata `{key}`: {e}")))
}

/// Everything needed to re-evaluate a trained system: parameters, config,
/// round and metric history. RNG positions are not stored.
pub fn system_to_checkpoint(system: &TrainedSystem) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.metadata.insert("config".into(), to_json(&system.config));
    ck.metadata.insert("history".into(), to_json(&system.history));
    ck.metadata.insert("round_stats".into(), to_json(&system.round_stats));
    ck.metadata.insert("best_round".into(), system.best_round.to_string());
    ck.metadata.insert("server/round".into(), system.server.round.to_string());
    ck.metadata.insert("clients".into(), system.clients.len().to_string());
    ck.tensors.insert(
        "server/global_item_embedding".into(),
        system.server.global_item_embedding.clone(),
    );
    ck.put_mlp("server/meta", &system.server.meta_net.params);
    for client in &system.clients {
        let prefix = format!("client/{}", client.user);
        ck.put_mlp(&format!("{prefix}/predictor"), &client.model.predictor);
        if let Some(q) = &client.model.user_embedding {
            let row = DenseMatrix::from_vec(1, q.len(), q.clone()).expect("embedding row");
            ck.tensors.insert(format!("{prefix}/user_embedding"), row);
        }
    }
    ck
}

pub fn system_from_checkpoint(ck: &Checkpoint) -> Result<TrainedSystem> {
    let config: TrainConfig = from_json(ck, "config")?;
    let history: Vec<EvalRecord> = from_json(ck, "history")?;
    let round_stats: Vec<RoundStats> = from_json(ck, "round_stats")?;
    let parse_count = |key: &str| -> Result<usize> {
        ck.meta(key)?
            .parse()
            .map_err(|_| corrupt(format!("metadata `{key}` is not a count")))
    };
    let best_round = parse_count("best_round")?;
    let meta_net = MetaAttributeNetwork::from_params(ck.take_mlp("server/meta")?)?;
    let server = ServerState::from_parts(
        ck.tensor("server/global_item_embedding")?.clone(),
        meta_net,
        parse_count("server/round")?,
        config.seed,
    )?;
    let clients = (0..parse_count("clients")?)
        .map(|u| {
            let prefix = format!("client/{u}");
            let predictor = ck.take_mlp(&format!("{prefix}/predictor"))?;
            let user_embedding = ck
                .tensors
                .get(&format!("{prefix}/user_embedding"))
                .map(|m| m.as_slice().to_vec());
            let model = ClientModel::from_parts(config.variant, user_embedding, predictor)?;
            if model.dim() != config.dim {
                return Err(corrupt(format!("client {u} has dimension {} not {}", model.dim(), config.dim)));
            }
            Ok(ClientState::from_model(u, model, config.seed))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedSystem {
        server,
        clients,
        config,
        history,
        round_stats,
        best_round,
    })
}

pub fn save_system(system: &TrainedSystem, path: &Path) -> Result<()> {
    system_to_checkpoint(system).save(path)
}

pub fn load_system(path: &Path) -> Result<TrainedSystem> {
    system_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ItemSplit, SyntheticConfig};
    use crate::federation::{evaluate, run_training};

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("k".into(), "välue".into());
        let odd = DenseMatrix::from_vec(2, 2, vec![-0.0, f64::MIN_POSITIVE / 2.0, 1e300, 1.0 / 3.0]).unwrap();
        ck.tensors.insert("t".into(), odd.clone());
        ck.tensors.insert("empty".into(), DenseMatrix::zeros(0, 5));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.tensors["t"]), bits(&odd));
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        Checkpoint::default().write_to(&mut buf).unwrap();
        assert!(matches!(Checkpoint::read_from(&b"NOPE"[..]), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
        let mut version = buf.clone();
        version[4] = 9;
        assert!(Checkpoint::read_from(&version[..]).is_err());
    }

    #[test]
    fn trained_system_round_trips() {
        let ds = generate_synthetic(
            &SyntheticConfig {
                users: 6,
                warm_items: 20,
                cold_val_items: 5,
                cold_test_items: 6,
                latent_dim: 2,
                attribute_dim: 4,
                interactions_per_user: 3,
                relevant_per_user: 2,
                ..SyntheticConfig::default()
            },
            0,
        )
        .unwrap();
        let config = TrainConfig {
            dim: 4,
            rounds: 2,
            eval_every: 1,
            ks: vec![2],
            ..TrainConfig::default()
        };
        let sys = run_training(&ds, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("system.ckpt");
        save_system(&sys, &path).unwrap();
        let back = load_system(&path).unwrap();
        assert_eq!(back.config, sys.config);
        assert_eq!(back.history, sys.history);
        assert_eq!(back.best_round, sys.best_round);
        assert_eq!(back.server.global_item_embedding, sys.server.global_item_embedding);
        for (a, b) in back.clients.iter().zip(&sys.clients) {
            assert_eq!(a.model, b.model);
        }
        assert_eq!(
            evaluate(&back, &ds, ItemSplit::Test).unwrap(),
            evaluate(&sys, &ds, ItemSplit::Test).unwrap()
        );
        let pf = TrainConfig { variant: crate::model::Variant::Pfedrec, item_lr: 0.1, ..config };
        let pf = run_training(&ds, &pf).unwrap();
        let back = system_from_checkpoint(&system_to_checkpoint(&pf)).unwrap();
        assert!(back.clients.iter().all(|c| c.model.user_embedding.is_none()));
    }
}
