//! Grayscale PGM (binary `P5`) export of a single flow channel.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use star_core::series::{FlowFrame, INFLOW, OUTFLOW};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Inflow,
    Outflow,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::Inflow => INFLOW,
            Channel::Outflow => OUTFLOW,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Inflow => "inflow",
            Channel::Outflow => "outflow",
        }
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inflow" | "in" => Ok(Channel::Inflow),
            "outflow" | "out" => Ok(Channel::Outflow),
            other => Err(format!("unknown channel {other:?} (expected inflow or outflow)")),
        }
    }
}

/// PGM bytes: `J` wide, `I` tall, row 0 at the top. Values map linearly from
/// `[0, frame max]` to `[0, 255]`, where the max is taken over both channels.
pub fn encode_pgm(frame: &FlowFrame, channel: Channel) -> Vec<u8> {
    let max = frame.data().iter().fold(0.0f32, |m, &v| m.max(v));
    let mut out = format!("P5\n{} {}\n255\n", frame.cols(), frame.rows()).into_bytes();
    out.extend(frame.channel(channel.index()).iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn heatmap_export(frame: &FlowFrame, channel: Channel, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(frame, channel))?;
    f.flush()
}
