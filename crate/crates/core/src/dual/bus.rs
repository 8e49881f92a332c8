//! Message rounds between the price supervisor and the agents.
//!
//! One round is a price broadcast followed by one reply per agent. Replies are
//! returned in agent order (users first, provider last). The socket transport
//! frames every message as one line of JSON.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::response::{
    provider_profit, provider_supply_response, spot_purchase, spot_slope, supply_slope, user_best_response,
};
use crate::model::{PriceSignal, ProviderCost, Scenario, SpotMarket, UserModel};

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("round {round} timed out after {timeout:?}")]
    Timeout { round: usize, timeout: Duration },
    #[error("transport error: {0}")]
    Io(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("agent {agent} failed: {message}")]
    Agent { agent: usize, message: String },
}

impl From<std::io::Error> for BusError {
    fn from(e: std::io::Error) -> Self {
        BusError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PriceBroadcast,
    DemandReply,
    SupplyReply,
}

/// One frame. `payload` is the price vector for a broadcast, the net grid draw
/// for a demand reply and own generation for a supply reply; the optional
/// fields carry the detail the supervisor needs for primal recovery, the dual
/// value and Newton steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub round: usize,
    pub direction: Direction,
    pub payload: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<usize>,
    /// Local `∂payload_t/∂p_t`; absent for agents without a smooth response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
    /// Spot purchases accompanying a supply reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spot: Option<Vec<f64>>,
    /// The agent's optimal surplus (users) or profit (provider) at the price.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surplus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RoundMessage {
    pub fn broadcast(round: usize, prices: &PriceSignal) -> Self {
        RoundMessage::new(round, Direction::PriceBroadcast, prices.0.clone())
    }

    fn new(round: usize, direction: Direction, payload: Vec<f64>) -> Self {
        RoundMessage {
            round,
            direction,
            payload,
            agent: None,
            slope: None,
            q: None,
            r: None,
            d: None,
            spot: None,
            surplus: None,
            error: None,
        }
    }

    fn failure(round: usize, direction: Direction, agent: usize, message: String) -> Self {
        RoundMessage {
            agent: Some(agent),
            error: Some(message),
            ..RoundMessage::new(round, direction, Vec::new())
        }
    }
}

/// A participant answering price broadcasts.
pub trait Agent: Send {
    fn respond(&mut self, msg: &RoundMessage) -> RoundMessage;
}

pub struct UserAgent {
    pub index: usize,
    pub user: UserModel,
    pub slot_duration: f64,
    /// Whether to attach the local slope to replies. Users with a battery never
    /// do: their storage reply is piecewise constant in price.
    pub report_slope: bool,
}

impl Agent for UserAgent {
    fn respond(&mut self, msg: &RoundMessage) -> RoundMessage {
        let p = PriceSignal(msg.payload.clone());
        match user_best_response(&self.user, &p, self.slot_duration) {
            Ok(rep) => {
                let smooth = self.report_slope && !self.user.has_battery();
                RoundMessage {
                    agent: Some(self.index),
                    slope: smooth.then(|| rep.slope.clone()),
                    surplus: Some(rep.surplus),
                    ..RoundMessage::new(msg.round, Direction::DemandReply, rep.draw())
                }
                .with_schedule(rep.q, rep.r, rep.d)
            }
            Err(e) => RoundMessage::failure(msg.round, Direction::DemandReply, self.index, e.to_string()),
        }
    }
}

impl RoundMessage {
    fn with_schedule(mut self, q: Vec<f64>, r: Vec<f64>, d: Vec<f64>) -> Self {
        self.q = Some(q);
        self.r = Some(r);
        self.d = Some(d);
        self
    }
}

/// How the provider values spot purchases.
#[derive(Debug, Clone, PartialEq)]
pub enum SpotPricing {
    /// Integrated outlay `pi0 g + (kappa/2) g^2`.
    Internalized,
    /// Price taker at `price_t`, with a proximal pull `(inertia_t/2)(g - anchor_t)^2`.
    Linearized {
        price: Vec<f64>,
        anchor: Vec<f64>,
        inertia: Vec<f64>,
    },
}

pub struct ProviderAgent {
    pub index: usize,
    pub cost: ProviderCost,
    pub spot: Option<(SpotMarket, SpotPricing)>,
    pub report_slope: bool,
}

impl ProviderAgent {
    fn purchase(&self, p: &PriceSignal) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let (m, pricing) = self.spot.as_ref()?;
        let n = p.len();
        let (g, slope, outlay): (Vec<f64>, Vec<f64>, Vec<f64>) = match pricing {
            SpotPricing::Internalized => {
                let g = spot_purchase(m, p);
                let outlay = (0..n).map(|t| m.outlay(t, g[t])).collect();
                (g, spot_slope(m, p), outlay)
            }
            SpotPricing::Linearized {
                price,
                anchor,
                inertia,
            } => {
                let mut g = vec![0.0; n];
                let mut slope = vec![0.0; n];
                let mut outlay = vec![0.0; n];
                for t in 0..n {
                    g[t] = if inertia[t] > 0.0 {
                        (anchor[t] + (p[t] - price[t]) / inertia[t]).clamp(0.0, m.g_max[t])
                    } else if p[t] > price[t] {
                        m.g_max[t]
                    } else {
                        0.0
                    };
                    if inertia[t] > 0.0 && g[t] > 0.0 && g[t] < m.g_max[t] {
                        slope[t] = 1.0 / inertia[t];
                    }
                    let pull = g[t] - anchor[t];
                    outlay[t] = price[t] * g[t] + 0.5 * inertia[t] * pull * pull;
                }
                (g, slope, outlay)
            }
        };
        let profit = (0..n).map(|t| p[t] * g[t] - outlay[t]).sum();
        Some((g, slope, profit))
    }
}

impl Agent for ProviderAgent {
    fn respond(&mut self, msg: &RoundMessage) -> RoundMessage {
        let p = PriceSignal(msg.payload.clone());
        let supply = provider_supply_response(&self.cost, &p);
        let mut slope = supply_slope(&self.cost, &p);
        let mut surplus = provider_profit(&self.cost, &p, &supply);
        let mut spot = None;
        if let Some((g, gs, profit)) = self.purchase(&p) {
            for (s, extra) in slope.iter_mut().zip(&gs) {
                *s += extra;
            }
            surplus += profit;
            spot = Some(g);
        }
        RoundMessage {
            agent: Some(self.index),
            slope: self.report_slope.then_some(slope),
            spot,
            surplus: Some(surplus),
            ..RoundMessage::new(msg.round, Direction::SupplyReply, supply)
        }
    }
}

/// One agent per user followed by the provider, all reporting slopes.
pub fn agents_for(s: &Scenario) -> Vec<Box<dyn Agent>> {
    agents_with_pricing(s, SpotPricing::Internalized)
}

pub(crate) fn agents_with_pricing(s: &Scenario, pricing: SpotPricing) -> Vec<Box<dyn Agent>> {
    let mut agents: Vec<Box<dyn Agent>> = Vec::with_capacity(s.users.len() + 1);
    for (i, u) in s.users.iter().enumerate() {
        agents.push(Box::new(UserAgent {
            index: i,
            user: u.clone(),
            slot_duration: s.dt(),
            report_slope: true,
        }));
    }
    agents.push(Box::new(ProviderAgent {
        index: s.users.len(),
        cost: s.provider.clone(),
        spot: s.spot.clone().map(|m| (m, pricing)),
        report_slope: true,
    }));
    agents
}

/// Transport carrying one round at a time.
pub trait MessageBus {
    /// Delivers the broadcast to every agent and returns the replies in agent order.
    fn exchange(&mut self, broadcast: &RoundMessage) -> Result<Vec<RoundMessage>, BusError>;
    fn agent_count(&self) -> usize;
}

/// Deterministic in-process delivery.
pub struct InProcessBus {
    agents: Vec<Box<dyn Agent>>,
}

impl InProcessBus {
    pub fn new(agents: Vec<Box<dyn Agent>>) -> Self {
        InProcessBus { agents }
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        Self::new(agents_for(s))
    }
}

impl MessageBus for InProcessBus {
    fn exchange(&mut self, broadcast: &RoundMessage) -> Result<Vec<RoundMessage>, BusError> {
        Ok(self.agents.iter_mut().map(|a| a.respond(broadcast)).collect())
    }

    fn agent_count(&self) -> usize {
        self.agents.len()
    }
}

pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Serialize, Deserialize)]
struct Hello {
    agent: usize,
}

struct Link {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Localhost TCP transport. Each agent runs on its own thread behind its own
/// connection; the supervisor writes the broadcast to every connection and
/// then reads one reply line from each, failing the round at the deadline.
pub struct TcpBus {
    links: Vec<Link>,
    workers: Vec<JoinHandle<()>>,
    timeout: Duration,
    port: u16,
}

fn agent_loop(agent: &mut dyn Agent, index: usize, port: u16) -> std::io::Result<()> {
    let stream = TcpStream::connect(("127.0.0.1", port))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let hello = serde_json::to_string(&Hello { agent: index }).map_err(std::io::Error::other)?;
    writeln!(writer, "{hello}")?;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let reply = match serde_json::from_str::<RoundMessage>(&line) {
            Ok(msg) => agent.respond(&msg),
            Err(e) => RoundMessage::failure(0, Direction::DemandReply, index, e.to_string()),
        };
        let text = serde_json::to_string(&reply).map_err(std::io::Error::other)?;
        writeln!(writer, "{text}")?;
    }
}

fn read_frame(
    link: &mut Link,
    deadline: Instant,
    round: usize,
    timeout: Duration,
) -> Result<String, BusError> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    if remaining.is_zero() {
        return Err(BusError::Timeout { round, timeout });
    }
    link.writer.set_read_timeout(Some(remaining))?;
    let mut line = String::new();
    match link.reader.read_line(&mut line) {
        Ok(0) => Err(BusError::Io("agent closed the connection".into())),
        Ok(_) => Ok(line),
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            Err(BusError::Timeout { round, timeout })
        }
        Err(e) => Err(e.into()),
    }
}

impl TcpBus {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts one thread per agent.
    pub fn spawn(agents: Vec<Box<dyn Agent>>, port: u16, timeout: Duration) -> Result<Self, BusError> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let port = listener.local_addr()?.port();
        let n = agents.len();
        let workers: Vec<JoinHandle<()>> = agents
            .into_iter()
            .enumerate()
            .map(|(k, mut agent)| {
                std::thread::spawn(move || {
                    let _ = agent_loop(agent.as_mut(), k, port);
                })
            })
            .collect();
        let deadline = Instant::now() + timeout;
        listener.set_nonblocking(true)?;
        let mut slots: Vec<Option<Link>> = (0..n).map(|_| None).collect();
        let mut joined = 0;
        while joined < n {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    let writer = stream.try_clone()?;
                    let mut link = Link {
                        reader: BufReader::new(stream),
                        writer,
                    };
                    let line = read_frame(&mut link, deadline, 0, timeout)?;
                    let hello: Hello = serde_json::from_str(&line)
                        .map_err(|e| BusError::Protocol(format!("bad handshake: {e}")))?;
                    match slots.get_mut(hello.agent) {
                        Some(slot @ None) => *slot = Some(link),
                        _ => return Err(BusError::Protocol(format!("unexpected agent {}", hello.agent))),
                    }
                    joined += 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(BusError::Timeout { round: 0, timeout });
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(e.into()),
            }
        }
        // Built only once every agent joined: on the error paths above the
        // workers are detached and exit when their connection drops.
        Ok(TcpBus {
            links: slots.into_iter().map(|l| l.expect("all agents joined")).collect(),
            workers,
            timeout,
            port,
        })
    }

    pub fn for_scenario(s: &Scenario, port: u16, timeout: Duration) -> Result<Self, BusError> {
        Self::spawn(agents_for(s), port, timeout)
    }

    pub fn port(&self) -> u16 {
        self.port
    }
}

impl MessageBus for TcpBus {
    fn exchange(&mut self, broadcast: &RoundMessage) -> Result<Vec<RoundMessage>, BusError> {
        let text = serde_json::to_string(broadcast).map_err(|e| BusError::Protocol(e.to_string()))?;
        for link in &mut self.links {
            writeln!(link.writer, "{text}")?;
        }
        let deadline = Instant::now() + self.timeout;
        let round = broadcast.round;
        let mut replies = Vec::with_capacity(self.links.len());
        for link in &mut self.links {
            let line = read_frame(link, deadline, round, self.timeout)?;
            let msg: RoundMessage =
                serde_json::from_str(&line).map_err(|e| BusError::Protocol(e.to_string()))?;
            replies.push(msg);
        }
        Ok(replies)
    }

    fn agent_count(&self) -> usize {
        self.links.len()
    }
}

impl Drop for TcpBus {
    fn drop(&mut self) {
        for link in &self.links {
            let _ = link.writer.shutdown(Shutdown::Both);
        }
        self.links.clear();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
