//! Runs the two parties of a protocol side by side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocols::{Party, ProtocolConfig};
use crate::ring::FixedPointCodec;
use crate::seeds::substream;
use crate::shares::PartyId;
use crate::transport::{loopback_pair, tcp_pair, CostLedger, Transport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportKind {
    /// In-process channels.
    #[default]
    Loopback,
    /// Framed TCP over localhost.
    Socket,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "socket" => Ok(TransportKind::Socket),
            _ => Err(Error::Config(format!("unknown transport '{s}' (loopback|socket)"))),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Socket => "socket",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionConfig {
    pub seed: u64,
    pub codec: FixedPointCodec,
    pub protocol: ProtocolConfig,
    pub transport: TransportKind,
    /// Record a per-round trace in each ledger.
    pub trace: bool,
}

impl SessionConfig {
    pub fn new(seed: u64) -> Self {
        SessionConfig {
            seed,
            codec: FixedPointCodec::default(),
            protocol: ProtocolConfig::default(),
            transport: TransportKind::Loopback,
            trace: false,
        }
    }
}

/// Output of a finished session.
#[derive(Debug)]
pub struct SessionResult<R> {
    pub outputs: (R, R),
    /// The ledger both parties agreed on.
    pub ledger: CostLedger,
}

/// Runs `f` as both parties, each on its own thread. The dealer seed is the
/// `dealer` substream of `cfg.seed`; private randomness comes from
/// per-party substreams.
pub fn run<R, F>(cfg: &SessionConfig, f: F) -> Result<SessionResult<R>>
where
    R: Send,
    F: Fn(&mut Party) -> Result<R> + Sync,
{
    let (l0, l1): (Box<dyn Transport>, Box<dyn Transport>) = match cfg.transport {
        TransportKind::Loopback => {
            let (a, b) = loopback_pair();
            (Box::new(a), Box::new(b))
        }
        TransportKind::Socket => {
            let (a, b) = tcp_pair()?;
            (Box::new(a), Box::new(b))
        }
    };
    let dealer = substream(cfg.seed, "dealer");
    let run_one = |id: PartyId, link: Box<dyn Transport>| -> Result<(R, CostLedger)> {
        let private = substream(cfg.seed, &format!("party-{}", id.index()));
        let mut p = Party::new(id, link, dealer, private, cfg.codec, cfg.protocol);
        if cfg.trace {
            p.ledger_mut().enable_trace();
        }
        let out = f(&mut p)?;
        Ok((out, p.take_ledger()))
    };
    let (r0, r1) = std::thread::scope(|s| {
        let run_one = &run_one;
        let h0 = s.spawn(move || run_one(PartyId::ModelOwner, l0));
        let h1 = s.spawn(move || run_one(PartyId::DataOwner, l1));
        (join(h0), join(h1))
    });
    let ((o0, mut g0), (o1, g1)) = match (r0, r1) {
        (Ok(a), Ok(b)) => (a, b),
        // a party that dies takes its channel with it; report the cause,
        // not the peer's hang-up
        (Err(e), Err(Error::Transport(_))) | (Err(Error::Transport(_)), Err(e)) => return Err(e),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let trace = g0.take_trace();
    let mut ledger = CostLedger::merge_parties(g0, &g1)?;
    if cfg.trace {
        ledger.enable_trace();
        ledger.absorb_trace(trace);
    }
    Ok(SessionResult {
        outputs: (o0, o1),
        ledger,
    })
}

fn join<T>(h: std::thread::ScopedJoinHandle<'_, Result<T>>) -> Result<T> {
    h.join()
        .unwrap_or_else(|_| Err(Error::Transport("party thread panicked".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shares::PartyId;
    use crate::transport::RevealKind;

    fn sum_of_inputs(p: &mut Party) -> Result<f64> {
        let mine = [if p.is_leader() { 1.25 } else { 2.5 }];
        let a = p.input("in", PartyId::ModelOwner, p.is_leader().then_some(&mine[..]), vec![1])?;
        let b = p.input("in", PartyId::DataOwner, (!p.is_leader()).then_some(&mine[..]), vec![1])?;
        let s = p.mul("mul", &a, &b)?;
        Ok(p.reveal("out", &s, RevealKind::Intermediate)?[0])
    }

    #[test]
    fn loopback_and_socket_ledgers_agree() {
        let mut cfg = SessionConfig::new(4);
        let a = run(&cfg, sum_of_inputs).unwrap();
        cfg.transport = TransportKind::Socket;
        let b = run(&cfg, sum_of_inputs).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert!((a.outputs.0 - 3.125).abs() < 1e-4);
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn failing_party_reports_its_own_error() {
        let cfg = SessionConfig::new(1);
        let err = run(&cfg, |p| {
            if p.is_leader() {
                Err(Error::Config("boom".into()))
            } else {
                p.exchange_words("x", &[]).map(|_| ())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn trace_is_kept() {
        let mut cfg = SessionConfig::new(2);
        cfg.trace = true;
        let mut r = run(&cfg, sum_of_inputs).unwrap();
        assert_eq!(r.ledger.take_trace().len() as u64, r.ledger.total().rounds);
    }
}
