//! RIFF WAV import/export (16-bit PCM and 32-bit IEEE float).

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::signal::MultichannelSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn write_wav(path: impl AsRef<Path>, signal: &MultichannelSignal, encoding: WavEncoding) -> Result<()> {
    let channels = u16::try_from(signal.channels())
        .map_err(|_| Error::Config("too many channels for WAV".into()))?;
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels,
            sample_rate: signal.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels,
            sample_rate: signal.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
    let s = signal.samples();
    for t in 0..signal.len() {
        for c in 0..signal.channels() {
            let v = s[[c, t]];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    write_atomic(path, &cursor.into_inner())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("WAV file declares zero channels".into()));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let len = interleaved.len() / channels;
    let mut per_channel = vec![Vec::with_capacity(len); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            per_channel[c].push(v);
        }
    }
    MultichannelSignal::from_channels(per_channel, spec.sample_rate)
}
