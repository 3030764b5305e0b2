//! Static service discovery.
//!
//! ```text
//! shardrec-topology v1
//! main 127.0.0.1:7000
//! sparse 0 127.0.0.1:7001
//! sparse 1 127.0.0.1:7002
//! injected_rpc_delay_us 0
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use super::TransportError;

pub const TOPOLOGY_MAGIC: &str = "shardrec-topology v1";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Topology {
    pub main: String,
    /// Indexed by shard id.
    pub sparse: Vec<String>,
    /// Slept by sparse shards after reading each request.
    pub injected_rpc_delay: Duration,
}

impl Topology {
    pub fn render(&self) -> String {
        let mut s = format!("{TOPOLOGY_MAGIC}\nmain {}\n", self.main);
        for (i, a) in self.sparse.iter().enumerate() {
            let _ = writeln!(s, "sparse {i} {a}");
        }
        let _ = writeln!(s, "injected_rpc_delay_us {}", self.injected_rpc_delay.as_micros());
        s
    }

    pub fn parse(text: &str) -> Result<Self, TransportError> {
        let err = |line: usize, m: String| TransportError::Topology(format!("line {line}: {m}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l == TOPOLOGY_MAGIC => {}
            Some((n, l)) => return Err(err(n, format!("expected `{TOPOLOGY_MAGIC}`, got `{l}`"))),
            None => return Err(err(0, "empty topology".into())),
        }
        let mut topo = Topology::default();
        let mut sparse: Vec<(u32, String)> = Vec::new();
        let mut main = None;
        for (n, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["main", addr] => main = Some(addr.to_string()),
                ["sparse", id, addr] => {
                    let id: u32 = id.parse().map_err(|_| err(n, format!("bad shard id `{id}`")))?;
                    sparse.push((id, addr.to_string()));
                }
                ["injected_rpc_delay_us", us] => {
                    let us: u64 = us.parse().map_err(|_| err(n, format!("bad delay `{us}`")))?;
                    topo.injected_rpc_delay = Duration::from_micros(us);
                }
                _ => return Err(err(n, format!("unrecognised line `{line}`"))),
            }
        }
        topo.main = main.ok_or_else(|| err(0, "no main endpoint".into()))?;
        sparse.sort();
        for (i, (id, _)) in sparse.iter().enumerate() {
            if *id as usize != i {
                return Err(err(0, format!("sparse shard ids must be dense from 0; found {id} at position {i}")));
            }
        }
        topo.sparse = sparse.into_iter().map(|(_, a)| a).collect();
        Ok(topo)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TransportError> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = Topology {
            main: "127.0.0.1:7000".into(),
            sparse: vec!["127.0.0.1:7001".into(), "10.0.0.2:7001".into()],
            injected_rpc_delay: Duration::from_millis(5),
        };
        assert_eq!(Topology::parse(&t.render()).unwrap(), t);
    }

    #[test]
    fn gaps_rejected() {
        let text = format!("{TOPOLOGY_MAGIC}\nmain a:1\nsparse 0 b:1\nsparse 2 c:1\n");
        assert!(Topology::parse(&text).is_err());
        assert!(Topology::parse("main a:1\n").is_err());
    }
}
