//! Model spec file format.
//!
//! ```text
//! shardrec-model v1
//! model_id <id>
//! default_batch_size <n>
//! net <id> role=<user|candidate> dense_in=<n> tables=<ids> bottom=<ids> interaction=<ids> top=<ids>
//! layer <id> net=<id> in=<n> out=<n> act=<relu|identity|sigmoid>
//! table <id> net=<id> rows=<n> dim=<n> pooling=<sum|concat:K> pf=<f64> lookups=<const:K|powerlaw:ALPHA:MAX>
//! --- payload
//! <little-endian f32: tables in id order (row-major), then layers in id order (weight, bias)>
//! ```
//!
//! Id lists are comma separated; `-` denotes an empty list.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{
    Activation, DenseLayer, EmbeddingTable, LayerMeta, LookupDist, ModelError, ModelHeader,
    ModelSpec, Net, NetRole, Pooling, TableId, TableMeta,
};

pub const SPEC_MAGIC: &str = "shardrec-model v1";
const PAYLOAD_MARKER: &str = "--- payload";

/// A model loaded with only some of its payloads.
#[derive(Debug, Clone)]
pub struct PartialModel {
    pub header: ModelHeader,
    pub tables: Vec<EmbeddingTable>,
    pub layers: Vec<DenseLayer>,
}

impl From<ModelSpec> for PartialModel {
    fn from(spec: ModelSpec) -> Self {
        PartialModel {
            header: spec.header(),
            tables: spec.tables,
            layers: spec.layers,
        }
    }
}

pub fn save_spec(spec: &ModelSpec, path: impl AsRef<Path>) -> Result<(), ModelError> {
    spec.validate()?;
    if spec.model_id.is_empty() || spec.model_id.chars().any(char::is_whitespace) {
        return Err(ModelError::Validation("model id must be non-empty without whitespace".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(render_header(&spec.header()).as_bytes())?;
    let mut tables: Vec<&EmbeddingTable> = spec.tables.iter().collect();
    tables.sort_by_key(|t| t.meta.table_id);
    for t in tables {
        write_f32s(&mut w, &t.values)?;
    }
    let mut layers: Vec<&DenseLayer> = spec.layers.iter().collect();
    layers.sort_by_key(|l| l.meta.layer_id);
    for l in layers {
        write_f32s(&mut w, &l.weight)?;
        write_f32s(&mut w, &l.bias)?;
    }
    w.flush()?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn ids(list: &[u32]) -> String {
    if list.is_empty() {
        "-".into()
    } else {
        list.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
    }
}

pub(crate) fn render_header(h: &ModelHeader) -> String {
    let mut s = format!("{SPEC_MAGIC}\nmodel_id {}\ndefault_batch_size {}\n", h.model_id, h.default_batch_size);
    let mut nets: Vec<&Net> = h.nets.iter().collect();
    nets.sort_by_key(|n| n.net_id);
    for n in nets {
        let role = match n.role {
            NetRole::User => "user",
            NetRole::Candidate => "candidate",
        };
        s += &format!(
            "net {} role={role} dense_in={} tables={} bottom={} interaction={} top={}\n",
            n.net_id,
            n.dense_input_dim,
            ids(&n.table_ids),
            ids(&n.bottom_layers),
            ids(&n.interaction_layers),
            ids(&n.top_layers)
        );
    }
    let mut layers: Vec<&LayerMeta> = h.layers.iter().collect();
    layers.sort_by_key(|l| l.layer_id);
    for l in layers {
        let act = match l.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
        };
        s += &format!("layer {} net={} in={} out={} act={act}\n", l.layer_id, l.net_id, l.in_dim, l.out_dim);
    }
    let mut tables: Vec<&TableMeta> = h.tables.iter().collect();
    tables.sort_by_key(|t| t.table_id);
    for t in tables {
        let pooling = match t.pooling {
            Pooling::Sum => "sum".to_string(),
            Pooling::Concat { width } => format!("concat:{width}"),
        };
        let lookups = match t.lookups {
            LookupDist::Constant(k) => format!("const:{k}"),
            LookupDist::PowerLaw { alpha, max } => format!("powerlaw:{alpha}:{max}"),
        };
        s += &format!(
            "table {} net={} rows={} dim={} pooling={pooling} pf={} lookups={lookups}\n",
            t.table_id, t.net_id, t.num_rows, t.dim, t.est_pooling_factor
        );
    }
    s += PAYLOAD_MARKER;
    s.push('\n');
    s
}

struct Fields<'a> {
    line: usize,
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, parts: impl Iterator<Item = &'a str>) -> Result<Self, ModelError> {
        let mut map = HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| perr(line, format!("expected key=value, got `{p}`")))?;
            map.insert(k, v);
        }
        Ok(Self { line, map })
    }

    fn raw(&self, key: &str) -> Result<&'a str, ModelError> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| perr(self.line, format!("missing field `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, ModelError> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| perr(self.line, format!("field `{key}`: invalid number `{v}`")))
    }

    fn ids(&self, key: &str) -> Result<Vec<u32>, ModelError> {
        let v = self.raw(key)?;
        if v == "-" {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| x.parse().map_err(|_| perr(self.line, format!("field `{key}`: invalid id `{x}`"))))
            .collect()
    }
}

fn perr(line: usize, message: String) -> ModelError {
    ModelError::Parse { line, message }
}

fn parse_id(line: usize, s: Option<&str>) -> Result<u32, ModelError> {
    let s = s.ok_or_else(|| perr(line, "missing id".into()))?;
    s.parse().map_err(|_| perr(line, format!("invalid id `{s}`")))
}

/// Parse the header and return it with the byte offset of the payload.
fn read_header(r: &mut impl BufRead) -> Result<(ModelHeader, u64), ModelError> {
    let mut offset = 0u64;
    let mut lineno = 0usize;
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<Option<usize>, ModelError> {
        line.clear();
        let n = r.read_line(line)?;
        if n == 0 {
            return Ok(None);
        }
        offset += n as u64;
        lineno += 1;
        Ok(Some(lineno))
    };

    match next(&mut line)? {
        Some(_) if line.trim_end() == SPEC_MAGIC => {}
        Some(l) => return Err(perr(l, format!("expected `{SPEC_MAGIC}`, got `{}`", line.trim_end()))),
        None => return Err(perr(1, "empty file".into())),
    }

    let mut model_id = None;
    let mut batch = None;
    let mut nets = Vec::new();
    let mut layers = Vec::new();
    let mut tables = Vec::new();
    let mut terminated = false;
    while let Some(l) = next(&mut line)? {
        let text = line.trim_end_matches(['\n', '\r']);
        if text == PAYLOAD_MARKER {
            terminated = true;
            break;
        }
        let mut parts = text.split_whitespace();
        match parts.next() {
            Some("model_id") => {
                model_id = Some(parts.next().ok_or_else(|| perr(l, "missing model id".into()))?.to_string())
            }
            Some("default_batch_size") => batch = Some(parse_id(l, parts.next())?),
            Some("net") => {
                let id = parse_id(l, parts.next())?;
                let f = Fields::parse(l, parts)?;
                let role = match f.raw("role")? {
                    "user" => NetRole::User,
                    "candidate" => NetRole::Candidate,
                    other => return Err(perr(l, format!("field `role`: unknown `{other}`"))),
                };
                nets.push(Net {
                    net_id: id,
                    role,
                    dense_input_dim: f.num("dense_in")?,
                    table_ids: f.ids("tables")?,
                    bottom_layers: f.ids("bottom")?,
                    interaction_layers: f.ids("interaction")?,
                    top_layers: f.ids("top")?,
                });
            }
            Some("layer") => {
                let id = parse_id(l, parts.next())?;
                let f = Fields::parse(l, parts)?;
                let activation = match f.raw("act")? {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    "sigmoid" => Activation::Sigmoid,
                    other => return Err(perr(l, format!("field `act`: unknown `{other}`"))),
                };
                layers.push(LayerMeta {
                    layer_id: id,
                    net_id: f.num("net")?,
                    in_dim: f.num("in")?,
                    out_dim: f.num("out")?,
                    activation,
                });
            }
            Some("table") => {
                let id = parse_id(l, parts.next())?;
                let f = Fields::parse(l, parts)?;
                let pooling = match f.raw("pooling")? {
                    "sum" => Pooling::Sum,
                    p => match p.strip_prefix("concat:").and_then(|w| w.parse().ok()) {
                        Some(width) => Pooling::Concat { width },
                        None => return Err(perr(l, format!("field `pooling`: unknown `{p}`"))),
                    },
                };
                let lk = f.raw("lookups")?;
                let lookups = parse_lookups(lk).ok_or_else(|| perr(l, format!("field `lookups`: invalid `{lk}`")))?;
                tables.push(TableMeta {
                    table_id: id,
                    net_id: f.num("net")?,
                    num_rows: f.num("rows")?,
                    dim: f.num("dim")?,
                    pooling,
                    est_pooling_factor: f.num("pf")?,
                    lookups,
                });
            }
            Some(other) => return Err(perr(l, format!("unknown record `{other}`"))),
            None => return Err(perr(l, "blank line in header".into())),
        }
    }
    if !terminated {
        return Err(perr(lineno + 1, "header not terminated by payload marker".into()));
    }
    let header = ModelHeader {
        model_id: model_id.ok_or_else(|| perr(lineno, "missing model_id".into()))?,
        default_batch_size: batch.ok_or_else(|| perr(lineno, "missing default_batch_size".into()))?,
        nets,
        tables,
        layers,
    };
    header.validate()?;
    Ok((header, offset))
}

fn parse_lookups(s: &str) -> Option<LookupDist> {
    let mut it = s.split(':');
    match it.next()? {
        "const" => Some(LookupDist::Constant(it.next()?.parse().ok()?)),
        "powerlaw" => Some(LookupDist::PowerLaw {
            alpha: it.next()?.parse().ok()?,
            max: it.next()?.parse().ok()?,
        }),
        _ => None,
    }
}

pub fn load_header(path: impl AsRef<Path>) -> Result<ModelHeader, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_header(&mut r)?.0)
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<ModelSpec, ModelError> {
    let partial = load_partial(path, None, true)?;
    let spec = ModelSpec {
        model_id: partial.header.model_id,
        default_batch_size: partial.header.default_batch_size,
        nets: partial.header.nets,
        tables: partial.tables,
        layers: partial.layers,
    };
    Ok(spec)
}

/// Load the header plus the payloads of `tables` (all when `None`) and,
/// optionally, the dense layers. Unrequested payloads are skipped.
pub fn load_partial(
    path: impl AsRef<Path>,
    tables: Option<&[TableId]>,
    with_layers: bool,
) -> Result<PartialModel, ModelError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::with_capacity(1 << 20, file);
    let (header, payload_at) = read_header(&mut r)?;
    let wanted: Option<HashSet<TableId>> = tables.map(|t| t.iter().copied().collect());
    if let Some(w) = &wanted {
        if let Some(missing) = w.iter().find(|id| header.table(**id).is_none()) {
            return Err(ModelError::Validation(format!("requested unknown table {missing}")));
        }
    }

    let mut metas: Vec<&TableMeta> = header.tables.iter().collect();
    metas.sort_by_key(|t| t.table_id);
    let mut layer_metas: Vec<&LayerMeta> = header.layers.iter().collect();
    layer_metas.sort_by_key(|l| l.layer_id);
    let expected_len = payload_at + header.sparse_bytes() + header.dense_bytes();
    if file_len != expected_len {
        return Err(perr(
            header.tables.len() + header.layers.len() + header.nets.len() + 4,
            format!("payload is {} bytes, header describes {}", file_len - payload_at.min(file_len), expected_len - payload_at),
        ));
    }

    let mut pos = payload_at;
    let mut loaded = Vec::new();
    for meta in metas {
        let bytes = meta.size_bytes();
        if wanted.as_ref().is_none_or(|w| w.contains(&meta.table_id)) {
            r.seek(SeekFrom::Start(pos))?;
            let values = read_f32s(&mut r, (bytes / 4) as usize)?;
            loaded.push(EmbeddingTable { meta: meta.clone(), values });
        }
        pos += bytes;
    }
    let mut layers = Vec::new();
    if with_layers {
        r.seek(SeekFrom::Start(pos))?;
        for meta in layer_metas {
            let weight = read_f32s(&mut r, meta.in_dim as usize * meta.out_dim as usize)?;
            let bias = read_f32s(&mut r, meta.out_dim as usize)?;
            layers.push(DenseLayer { meta: meta.clone(), weight, bias });
        }
    }
    Ok(PartialModel { header, tables: loaded, layers })
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>, ModelError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => perr(0, "truncated payload".into()),
        _ => ModelError::Io(e),
    })?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_model, Archetype, SizeBudget};

    fn spec() -> ModelSpec {
        generate_model(Archetype::LongTailSmall, SizeBudget::mib(1), 9).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spec");
        for arch in Archetype::ALL {
            let s = generate_model(arch, SizeBudget::mib(2), 4).unwrap();
            save_spec(&s, &p).unwrap();
            assert!(load_spec(&p).unwrap() == s, "{arch}");
        }
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spec");
        save_spec(&spec(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_spec(&p), Err(ModelError::Parse { .. })));
        // Truncated inside the header as well.
        std::fs::write(&p, &bytes[..60]).unwrap();
        assert!(matches!(load_spec(&p), Err(ModelError::Parse { .. })));
    }

    #[test]
    fn unknown_net_reference_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spec");
        save_spec(&spec(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let at = text.find("table 0 net=0").unwrap();
        let mut patched = bytes.clone();
        patched[at + "table 0 net=".len()] = b'9';
        std::fs::write(&p, patched).unwrap();
        assert!(matches!(load_spec(&p), Err(ModelError::Validation(_))));
    }

    #[test]
    fn bad_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spec");
        std::fs::write(&p, format!("{SPEC_MAGIC}\nmodel_id x\ndefault_batch_size 4\nlayer 0 net=0 in=abc out=2 act=relu\n")).unwrap();
        match load_spec(&p) {
            Err(ModelError::Parse { line: 4, message }) => assert!(message.contains("in")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partial_load_reads_selected_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spec");
        let s = spec();
        save_spec(&s, &p).unwrap();
        let part = load_partial(&p, Some(&[3, 1]), false).unwrap();
        assert_eq!(part.tables.len(), 2);
        assert!(part.layers.is_empty());
        for t in &part.tables {
            assert!(s.table(t.meta.table_id).unwrap() == t);
        }
        assert_eq!(load_header(&p).unwrap(), s.header());
    }
}
