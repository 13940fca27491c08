//! Simulated coordinator/agent network.
//!
//! Time is counted in integer ticks. Every message goes through a lossy channel
//! driven by one seeded random stream. The coordinator uses stop-and-wait per agent
//! inside each round: a request that is not answered within the timeout is sent again
//! with a fresh sequence number, and the round ends once every agent has answered.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::error::{Error, Result};
use crate::protocol::{respond, AgentReply, AgentRequest, Backend, RequestKind};
use crate::sqp::TimesVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    EvalRequest,
    EvalReply,
    BoundsReply,
    StepBroadcast,
    FinalAssignment,
    Ack,
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::EvalRequest => "eval_request",
            MessageKind::EvalReply => "eval_reply",
            MessageKind::BoundsReply => "bounds_reply",
            MessageKind::StepBroadcast => "step_broadcast",
            MessageKind::FinalAssignment => "final_assignment",
            MessageKind::Ack => "ack",
        }
    }

    fn is_request(&self) -> bool {
        matches!(
            self,
            MessageKind::EvalRequest | MessageKind::StepBroadcast | MessageKind::FinalAssignment
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Coordinator,
    Agent(usize),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Coordinator => f.write_str("coordinator"),
            Node::Agent(i) => write!(f, "agent{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Request(AgentRequest),
    Reply(Box<AgentReply>),
    Assignment(TimesVector),
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Node,
    pub receiver: Node,
    /// Strictly increasing per `(sender, kind)`.
    pub seq: u64,
    pub round: u64,
    /// Sequence number of the request this message answers.
    pub in_reply_to: Option<u64>,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Probability that any single message is lost, in [0, 1).
    pub drop_probability: f64,
    /// Fixed part of the one-way latency (ticks).
    pub latency: u64,
    /// Extra latency drawn uniformly from `0..=jitter` (ticks).
    pub jitter: u64,
    pub seed: u64,
    /// Ticks to wait for a reply before sending the request again.
    pub timeout: u64,
    pub max_retransmissions: u32,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            drop_probability: 0.0,
            latency: 1,
            jitter: 0,
            seed: 0,
            timeout: 4,
            max_retransmissions: 20,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(Error::InvalidParameter(format!(
                "drop probability {} is outside [0, 1)",
                self.drop_probability
            )));
        }
        if self.timeout == 0 {
            return Err(Error::InvalidParameter("timeout must be at least one tick".into()));
        }
        Ok(())
    }

    pub fn lossless() -> Self {
        ChannelConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    At(u64),
    Dropped,
}

/// One channel use: Bernoulli loss, otherwise delivery after the sampled latency.
pub fn transmit(send_tick: u64, channel: &ChannelConfig, rng: &mut ChaCha8Rng) -> Delivery {
    let lost = rng.random::<f64>() < channel.drop_probability;
    let jitter = if channel.jitter > 0 {
        rng.random_range(0..=channel.jitter)
    } else {
        0
    };
    if lost {
        Delivery::Dropped
    } else {
        Delivery::At(send_tick + channel.latency + jitter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub tick: u64,
    pub kind: MessageKind,
    pub sender: Node,
    pub receiver: Node,
    pub seq: u64,
    pub round: u64,
    pub dropped: bool,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} seq={} round={} {}",
            self.tick,
            self.kind.name(),
            self.sender,
            self.receiver,
            self.seq,
            self.round,
            if self.dropped { "dropped" } else { "sent" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundStats {
    pub round: u64,
    pub ticks: u64,
    pub messages: u64,
    pub retransmissions: u64,
}

enum Event {
    Deliver(Message),
    Timeout { agent: usize, round: u64, attempt: u32 },
}

/// Message fabric between the coordinator and a set of in-process agents.
pub struct Fabric<'a> {
    agents: &'a [Agent],
    channel: ChannelConfig,
    rng: ChaCha8Rng,
    tick: u64,
    round: u64,
    seq: HashMap<(Node, MessageKind), u64>,
    trace: Vec<TraceEvent>,
    stats: Vec<RoundStats>,
}

impl<'a> Fabric<'a> {
    pub fn new(agents: &'a [Agent], channel: ChannelConfig) -> Result<Self> {
        channel.validate()?;
        Ok(Fabric {
            agents,
            channel,
            rng: ChaCha8Rng::seed_from_u64(channel.seed),
            tick: 0,
            round: 0,
            seq: HashMap::new(),
            trace: Vec::new(),
            stats: Vec::new(),
        })
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn round_stats(&self) -> &[RoundStats] {
        &self.stats
    }

    pub fn trace_lines(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }

    fn next_seq(&mut self, sender: Node, kind: MessageKind) -> u64 {
        let s = self.seq.entry((sender, kind)).or_insert(0);
        *s += 1;
        *s
    }

    /// Sends `msg` at the current tick and schedules its delivery if it survives.
    fn send(&mut self, msg: Message, queue: &mut Queue) {
        let outcome = transmit(self.tick, &self.channel, &mut self.rng);
        self.trace.push(TraceEvent {
            tick: self.tick,
            kind: msg.kind,
            sender: msg.sender,
            receiver: msg.receiver,
            seq: msg.seq,
            round: msg.round,
            dropped: outcome == Delivery::Dropped,
        });
        if let Delivery::At(t) = outcome {
            queue.push(t, Event::Deliver(msg));
        }
    }

    /// Runs one synchronous exchange: one request per agent, one answer each.
    /// Replies are produced by `answer`, at most once per agent.
    fn exchange(
        &mut self,
        kind: MessageKind,
        payloads: Vec<Payload>,
        mut answer: impl FnMut(usize, &Payload) -> Result<(MessageKind, Payload)>,
    ) -> Result<Vec<Payload>> {
        let n = self.agents.len();
        if payloads.len() != n {
            return Err(Error::Protocol(format!("{} requests for {n} agents", payloads.len())));
        }
        self.round += 1;
        let round = self.round;
        let start = self.tick;
        let sent_before = self.trace.len();
        let mut queue = Queue::default();
        let mut sent_seqs: Vec<Vec<u64>> = vec![Vec::new(); n];
        let mut attempts = vec![0u32; n];
        let mut answers: Vec<Option<(MessageKind, Payload)>> = vec![None; n];
        let mut received: Vec<Option<Payload>> = vec![None; n];
        let mut retransmissions = 0u64;

        for (i, payload) in payloads.iter().enumerate() {
            let seq = self.next_seq(Node::Coordinator, kind);
            sent_seqs[i].push(seq);
            let msg = Message {
                kind,
                sender: Node::Coordinator,
                receiver: Node::Agent(i),
                seq,
                round,
                in_reply_to: None,
                payload: payload.clone(),
            };
            self.send(msg, &mut queue);
            queue.push(self.tick + self.channel.timeout, Event::Timeout { agent: i, round, attempt: 0 });
        }

        while received.iter().any(|r| r.is_none()) {
            let Some((t, event)) = queue.pop() else {
                return Err(Error::Protocol("event queue drained before the round completed".into()));
            };
            self.tick = self.tick.max(t);
            match event {
                Event::Deliver(msg) if msg.kind.is_request() => {
                    let Node::Agent(i) = msg.receiver else {
                        return Err(Error::Protocol("request addressed to the coordinator".into()));
                    };
                    if answers[i].is_none() {
                        answers[i] = Some(answer(i, &msg.payload)?);
                    }
                    let (reply_kind, reply) = answers[i].clone().expect("answer computed above");
                    let seq = self.next_seq(Node::Agent(i), reply_kind);
                    let reply = Message {
                        kind: reply_kind,
                        sender: Node::Agent(i),
                        receiver: Node::Coordinator,
                        seq,
                        round: msg.round,
                        in_reply_to: Some(msg.seq),
                        payload: reply,
                    };
                    self.send(reply, &mut queue);
                }
                Event::Deliver(msg) => {
                    let Node::Agent(i) = msg.sender else {
                        return Err(Error::Protocol("reply sent by the coordinator".into()));
                    };
                    let fresh = msg.round == round
                        && msg.in_reply_to.is_some_and(|s| sent_seqs[i].contains(&s));
                    if fresh && received[i].is_none() {
                        received[i] = Some(msg.payload);
                    }
                }
                Event::Timeout { agent, round: r, attempt } => {
                    if r != round || received[agent].is_some() || attempt != attempts[agent] {
                        continue;
                    }
                    if attempts[agent] >= self.channel.max_retransmissions {
                        return Err(Error::RoundFailure {
                            round,
                            agent,
                            attempts: attempts[agent] + 1,
                        });
                    }
                    attempts[agent] += 1;
                    retransmissions += 1;
                    let seq = self.next_seq(Node::Coordinator, kind);
                    sent_seqs[agent].push(seq);
                    let msg = Message {
                        kind,
                        sender: Node::Coordinator,
                        receiver: Node::Agent(agent),
                        seq,
                        round,
                        in_reply_to: None,
                        payload: payloads[agent].clone(),
                    };
                    self.send(msg, &mut queue);
                    queue.push(
                        self.tick + self.channel.timeout,
                        Event::Timeout {
                            agent,
                            round,
                            attempt: attempts[agent],
                        },
                    );
                }
            }
        }
        self.stats.push(RoundStats {
            round,
            ticks: self.tick - start,
            messages: (self.trace.len() - sent_before) as u64,
            retransmissions,
        });
        Ok(received.into_iter().map(|r| r.expect("loop exits when all arrived")).collect())
    }

    /// Sends the final times to every agent and waits for the acknowledgements.
    pub fn assign(&mut self, times: &TimesVector) -> Result<()> {
        let payloads = vec![Payload::Assignment(times.clone()); self.agents.len()];
        self.exchange(MessageKind::FinalAssignment, payloads, |_, _| {
            Ok((MessageKind::Ack, Payload::Empty))
        })?;
        Ok(())
    }
}

impl Backend for Fabric<'_> {
    fn num_agents(&self) -> usize {
        self.agents.len()
    }

    fn round(&mut self, requests: &[AgentRequest]) -> Result<Vec<AgentReply>> {
        let kind = match requests.first().map(|r| r.kind) {
            Some(RequestKind::Sensitivities) => MessageKind::StepBroadcast,
            _ => MessageKind::EvalRequest,
        };
        let payloads = requests.iter().map(|r| Payload::Request(*r)).collect();
        let agents = self.agents;
        let replies = self.exchange(kind, payloads, |i, payload| {
            let Payload::Request(req) = payload else {
                return Err(Error::Protocol("agent received a non-request payload".into()));
            };
            let reply = respond(&agents[i], req)?;
            let kind = match reply {
                AgentReply::Setup(_) => MessageKind::BoundsReply,
                AgentReply::Snapshot(_) => MessageKind::EvalReply,
            };
            Ok((kind, Payload::Reply(Box::new(reply))))
        })?;
        replies
            .into_iter()
            .map(|p| match p {
                Payload::Reply(r) => Ok(*r),
                _ => Err(Error::Protocol("expected an agent reply".into())),
            })
            .collect()
    }
}

/// Min-heap of events ordered by tick, then by insertion.
#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, Event>,
    counter: u64,
}

impl Queue {
    fn push(&mut self, tick: u64, event: Event) {
        self.counter += 1;
        self.heap.push(Reverse((tick, self.counter)));
        self.events.insert(self.counter, event);
    }

    fn pop(&mut self) -> Option<(u64, Event)> {
        let Reverse((tick, id)) = self.heap.pop()?;
        self.events.remove(&id).map(|e| (tick, e))
    }
}
