use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Compute,
    Send,
    Recv,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::Send => "send",
            EventKind::Recv => "recv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
    /// Floats for transfers, FLOPs for compute.
    pub size: f64,
    pub tag: String,
    /// The other endpoint of a transfer.
    pub peer: Option<DeviceId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviceTimeline {
    pub events: Vec<Event>,
}

impl DeviceTimeline {
    pub fn last_end(&self, kind: EventKind) -> f64 {
        self.events.iter().filter(|e| e.kind == kind).fold(0.0, |m, e| m.max(e.end))
    }
}

/// Event log for every device touched by a simulation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timeline {
    devices: BTreeMap<DeviceId, DeviceTimeline>,
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceTimeline> {
        self.devices.get(&id)
    }

    pub fn devices(&self) -> impl Iterator<Item = (&DeviceId, &DeviceTimeline)> {
        self.devices.iter()
    }

    pub fn compute(&mut self, dev: DeviceId, start: f64, end: f64, flops: f64, tag: impl Into<String>) {
        self.devices.entry(dev).or_default().events.push(Event {
            kind: EventKind::Compute,
            start,
            end,
            size: flops,
            tag: tag.into(),
            peer: None,
        });
    }

    /// Records a point-to-point transfer as a matched send/recv pair.
    pub fn transfer(
        &mut self,
        from: DeviceId,
        to: DeviceId,
        start: f64,
        end: f64,
        floats: f64,
        tag: impl Into<String>,
    ) {
        let tag = tag.into();
        self.devices.entry(from).or_default().events.push(Event {
            kind: EventKind::Send,
            start,
            end,
            size: floats,
            tag: tag.clone(),
            peer: Some(to),
        });
        self.devices.entry(to).or_default().events.push(Event {
            kind: EventKind::Recv,
            start,
            end,
            size: floats,
            tag,
            peer: Some(from),
        });
    }

    /// Latest end time over all events.
    pub fn makespan(&self) -> f64 {
        self.devices
            .values()
            .flat_map(|d| d.events.iter())
            .fold(0.0, |m, e| m.max(e.end))
    }

    pub fn total(&self, kind: EventKind) -> f64 {
        self.devices
            .values()
            .flat_map(|d| d.events.iter())
            .filter(|e| e.kind == kind)
            .map(|e| e.size)
            .sum()
    }

    /// Floats sent by one device.
    pub fn sent_by(&self, dev: DeviceId) -> f64 {
        self.devices.get(&dev).map_or(0.0, |d| {
            d.events.iter().filter(|e| e.kind == EventKind::Send).map(|e| e.size).sum()
        })
    }

    pub fn comm_event_count(&self) -> usize {
        self.devices
            .values()
            .flat_map(|d| d.events.iter())
            .filter(|e| e.kind != EventKind::Compute)
            .count()
    }

    /// Checks the timeline invariants: compute events on one device never
    /// overlap, transfers of one kind never overlap on the same directed link
    /// (a device drives its model-axis and data-axis links independently),
    /// and every recv has a send on its peer with the same tag, times and size.
    pub fn validate(&self) -> Result<()> {
        for (id, d) in &self.devices {
            let mut lanes: BTreeMap<(u8, Option<DeviceId>), Vec<(f64, f64)>> = BTreeMap::new();
            for e in d.events.iter().filter(|e| e.end > e.start) {
                lanes.entry((e.kind as u8, e.peer)).or_default().push((e.start, e.end));
            }
            for ((kind, _), mut spans) in lanes {
                spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                for w in spans.windows(2) {
                    if w[1].0 < w[0].1 {
                        return Err(Error::Contract(format!(
                            "device {id:?}: overlapping {} events {:?} and {:?}",
                            [EventKind::Compute, EventKind::Send, EventKind::Recv][kind as usize].as_str(),
                            w[0],
                            w[1]
                        )));
                    }
                }
            }
            for e in d.events.iter().filter(|e| e.kind == EventKind::Recv) {
                let peer = e.peer.ok_or_else(|| Error::Contract("recv without peer".into()))?;
                let matched = self.devices.get(&peer).is_some_and(|p| {
                    p.events.iter().any(|s| {
                        s.kind == EventKind::Send
                            && s.tag == e.tag
                            && s.peer == Some(*id)
                            && s.start == e.start
                            && s.end == e.end
                            && s.size == e.size
                    })
                });
                if !matched {
                    return Err(Error::Contract(format!(
                        "device {id:?}: recv `{}` has no matching send on {peer:?}",
                        e.tag
                    )));
                }
            }
        }
        Ok(())
    }

    /// One row per event: `device_row,device_col,kind,start,end,size,tag`,
    /// devices in (row, col) order, events by (start, end, kind, tag).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("device_row,device_col,kind,start,end,size,tag\n");
        for (id, d) in &self.devices {
            let mut events: Vec<&Event> = d.events.iter().collect();
            events.sort_by(|a, b| {
                a.start
                    .total_cmp(&b.start)
                    .then(a.end.total_cmp(&b.end))
                    .then((a.kind as u8).cmp(&(b.kind as u8)))
                    .then(a.tag.cmp(&b.tag))
            });
            for e in events {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    id.row,
                    id.col,
                    e.kind.as_str(),
                    e.start,
                    e.end,
                    e.size,
                    e.tag
                );
            }
        }
        out
    }

    /// Appends all events of `other`, shifted by `offset`.
    pub fn append_shifted(&mut self, other: &Timeline, offset: f64) {
        for (id, d) in &other.devices {
            let dst = self.devices.entry(*id).or_default();
            for e in &d.events {
                let mut e = e.clone();
                e.start += offset;
                e.end += offset;
                dst.events.push(e);
            }
        }
    }
}
