//! CSV and JSON interchange formats.
//!
//! Counts: `setting,theta1_a,theta2_a,theta1_b,theta2_b,t_a,x_a,t_b,x_b,count`
//! with phases in quarter turns (0 or 1). Histograms, one file per detector:
//! `epoch_min,bin_ps,c0,c1,…`. Offsets:
//! `epoch_min,tau_ps,score`. Events:
//! `epoch,setting,time_a_ps,x_a,time_b_ps,x_b`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::drift::OffsetEstimate;
use crate::error::{Error, Result};
use crate::mzi::{Detector, Outcome, PhaseSetting};
use crate::sim::{Cell, CoincidenceEvent, CoincidenceRecord, HistogramTrace, Receiver, SettingPair};

pub const RECORD_HEADER: [&str; 10] = [
    "setting", "theta1_a", "theta2_a", "theta1_b", "theta2_b", "t_a", "x_a", "t_b", "x_b", "count",
];
pub const OFFSET_HEADER: [&str; 3] = ["epoch_min", "tau_ps", "score"];
pub const EVENT_HEADER: [&str; 6] = ["epoch", "setting", "time_a_ps", "x_a", "time_b_ps", "x_b"];
const HISTOGRAM_PREFIX: [&str; 2] = ["epoch_min", "bin_ps"];

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing column {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {name} value {raw:?}"),
    })
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn check_header(rdr: &mut csv::Reader<impl Read>, want: &[&str], exact: bool) -> Result<()> {
    let got = rdr.headers()?.clone();
    let ok = if exact {
        got.len() == want.len() && got.iter().zip(want).all(|(g, w)| g.trim() == *w)
    } else {
        got.len() >= want.len() && got.iter().zip(want).all(|(g, w)| g.trim() == *w)
    };
    if !ok {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header starting {}", want.join(",")),
        });
    }
    Ok(())
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).from_reader(r)
}

fn quarter(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<u8> {
    let q: u8 = field(rec, i, name, line)?;
    if q > 1 {
        return Err(Error::Parse {
            line,
            msg: format!("{name} must be 0 or 1 quarter turns, got {q}"),
        });
    }
    Ok(q)
}

fn quarters(p: PhaseSetting) -> Result<(u8, u8)> {
    p.quarter_turns()
        .ok_or_else(|| Error::ContractViolation(format!("phases {p:?} are not 0 or π/2")))
}

pub fn write_records<W: Write>(w: W, records: &[CoincidenceRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RECORD_HEADER)?;
    for r in records {
        let (a1, a2) = quarters(r.setting.alice)?;
        let (b1, b2) = quarters(r.setting.bob)?;
        wtr.write_record([
            r.setting_index.to_string(),
            a1.to_string(),
            a2.to_string(),
            b1.to_string(),
            b2.to_string(),
            r.cell.a.t.to_string(),
            r.cell.a.x.to_string(),
            r.cell.b.t.to_string(),
            r.cell.b.x.to_string(),
            r.count.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<CoincidenceRecord>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &RECORD_HEADER, true)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != RECORD_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, got {}", RECORD_HEADER.len(), rec.len()),
            });
        }
        let setting_index: usize = field(&rec, 0, "setting", line)?;
        let q: Vec<u8> = (1..5)
            .map(|i| quarter(&rec, i, RECORD_HEADER[i], line))
            .collect::<Result<_>>()?;
        let outcome = |ti: usize, xi: usize| -> Result<Outcome> {
            let t: u8 = field(&rec, ti, RECORD_HEADER[ti], line)?;
            let x: u8 = field(&rec, xi, RECORD_HEADER[xi], line)?;
            Detector::from_index(x)
                .and_then(|x| Outcome::new(t, x))
                .map_err(|e| Error::InvalidOutcome(format!("line {line}: {e}")))
        };
        out.push(CoincidenceRecord {
            setting_index,
            setting: SettingPair {
                alice: PhaseSetting::from_quarter_turns(q[0], q[1]),
                bob: PhaseSetting::from_quarter_turns(q[2], q[3]),
            },
            cell: Cell {
                a: outcome(5, 6)?,
                b: outcome(7, 8)?,
            },
            count: field(&rec, 9, "count", line)?,
        });
    }
    Ok(out)
}

pub fn write_histograms<W: Write>(w: W, traces: &[HistogramTrace]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    let width = traces.iter().map(|t| t.counts.len()).max().unwrap_or(0);
    let mut header: Vec<String> = HISTOGRAM_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("c{i}")));
    wtr.write_record(&header)?;
    for t in traces {
        let mut row = vec![
            t.epoch_min.to_string(),
            format!("{}", (t.bin_width_s * 1e12).round() as u64),
        ];
        row.extend(t.counts.iter().map(|c| c.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One trace per row, in file order.
pub fn read_histograms<R: Read>(r: R) -> Result<Vec<HistogramTrace>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &HISTOGRAM_PREFIX, false)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = line_of(&rec);
            let epoch_min: u32 = field(&rec, 0, "epoch_min", line)?;
            let bin_ps: u64 = field(&rec, 1, "bin_ps", line)?;
            if bin_ps == 0 {
                return Err(Error::Parse {
                    line,
                    msg: "bin_ps must be positive".into(),
                });
            }
            let counts = (2..rec.len())
                .map(|i| field::<u64>(&rec, i, "count", line))
                .collect::<Result<Vec<_>>>()?;
            Ok(HistogramTrace {
                bin_width_s: bin_ps as f64 * 1e-12,
                counts,
                epoch_min,
            })
        })
        .collect()
}

/// File name used for one detector's histograms, e.g. `histograms_a2.csv`.
pub fn histogram_file_name(receiver: Receiver, detector: Detector) -> String {
    format!("histograms_{}{}.csv", receiver.tag(), detector)
}

pub fn write_offsets<W: Write>(w: W, estimates: &[OffsetEstimate]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(OFFSET_HEADER)?;
    for e in estimates {
        wtr.write_record([
            e.epoch_min.to_string(),
            format!("{}", e.tau_s * 1e12),
            format!("{}", e.score),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_offsets<R: Read>(r: R) -> Result<Vec<OffsetEstimate>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &OFFSET_HEADER, true)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = line_of(&rec);
            let tau_ps: f64 = field(&rec, 1, "tau_ps", line)?;
            Ok(OffsetEstimate {
                epoch_min: field(&rec, 0, "epoch_min", line)?,
                tau_s: tau_ps * 1e-12,
                score: field(&rec, 2, "score", line)?,
            })
        })
        .collect()
}

fn event_row(e: &CoincidenceEvent) -> [String; 6] {
    [
        e.epoch.to_string(),
        e.setting_index.to_string(),
        e.time_a_ps.to_string(),
        e.x_a.to_string(),
        e.time_b_ps.to_string(),
        e.x_b.to_string(),
    ]
}

/// Streaming event writer; events can be appended epoch by epoch.
pub struct EventWriter<W: Write> {
    wtr: csv::Writer<W>,
}

impl<W: Write> EventWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(EVENT_HEADER)?;
        Ok(EventWriter { wtr })
    }

    pub fn write(&mut self, events: &[CoincidenceEvent]) -> Result<()> {
        for e in events {
            self.wtr.write_record(event_row(e))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.wtr.flush()?;
        Ok(())
    }
}

pub fn write_events<W: Write>(w: W, events: &[CoincidenceEvent]) -> Result<()> {
    let mut ew = EventWriter::new(w)?;
    ew.write(events)?;
    ew.finish()
}

/// Streams events in file order, grouped into runs of equal epoch.
pub fn for_each_epoch<R: Read>(r: R, mut f: impl FnMut(&[CoincidenceEvent]) -> Result<()>) -> Result<()> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &EVENT_HEADER, true)?;
    let mut batch: Vec<CoincidenceEvent> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let det = |i: usize| -> Result<Detector> {
            let x: u8 = field(&rec, i, EVENT_HEADER[i], line)?;
            Detector::from_index(x).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })
        };
        let e = CoincidenceEvent {
            epoch: field(&rec, 0, "epoch", line)?,
            setting_index: field(&rec, 1, "setting", line)?,
            time_a_ps: field(&rec, 2, "time_a_ps", line)?,
            x_a: det(3)?,
            time_b_ps: field(&rec, 4, "time_b_ps", line)?,
            x_b: det(5)?,
        };
        if batch.last().is_some_and(|b| b.epoch != e.epoch) {
            f(&batch)?;
            batch.clear();
        }
        batch.push(e);
    }
    if !batch.is_empty() {
        f(&batch)?;
    }
    Ok(())
}

pub fn read_events<R: Read>(r: R) -> Result<Vec<CoincidenceEvent>> {
    let mut out = Vec::new();
    for_each_epoch(r, |b| {
        out.extend_from_slice(b);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn open(path: impl AsRef<Path>) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
