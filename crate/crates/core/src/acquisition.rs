//! Double-buffered (ping-pong) sample acquisition.
//!
//! The producer owns the bank it is filling. When that bank is full its
//! storage is moved into a [`FullBank`] handle for the consumer and the
//! producer continues in the other bank. Dropping (or releasing) the handle
//! returns the storage, so a bank is never writable while a consumer holds
//! it. If the other bank is still held at switch time the just-filled bank
//! is not delivered: the producer keeps it, overwrites it with newer
//! samples and counts one overrun.

use std::ops::Deref;
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn param<T>(msg: impl Into<String>) -> Result<T, AcquisitionError> {
    Err(AcquisitionError::Parameter(msg.into()))
}

/// Seconds needed to fill one bank of `k` samples at `fs` Hz.
pub fn buffer_fill_duration(k: usize, fs: f64) -> Result<f64, AcquisitionError> {
    if k == 0 || !(fs > 0.0) {
        return param("k and fs must be positive");
    }
    Ok(k as f64 / fs)
}

/// Actuation cycles at `f_op` Hz that fit in one bank; may be fractional.
pub fn max_cycles(k: usize, f_op: f64, fs: f64) -> Result<f64, AcquisitionError> {
    if k == 0 || !(f_op > 0.0) || !(fs > 0.0) {
        return param("k, f_op and fs must be positive");
    }
    Ok(k as f64 * f_op / fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bank {
    A,
    B,
}

impl Bank {
    fn index(self) -> usize {
        match self {
            Bank::A => 0,
            Bank::B => 1,
        }
    }

    fn other(self) -> Bank {
        match self {
            Bank::A => Bank::B,
            Bank::B => Bank::A,
        }
    }
}

/// Read-only view of a filled bank. Releasing or dropping it hands the
/// storage back to the producer.
#[derive(Debug)]
pub struct FullBank<T> {
    data: Option<Box<[T]>>,
    len: usize,
    bank: Bank,
    seq: u64,
    home: Sender<(Bank, Box<[T]>)>,
}

impl<T> FullBank<T> {
    pub fn bank(&self) -> Bank {
        self.bank
    }

    /// Delivery sequence number, starting at 0.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn release(self) {}
}

impl<T> Deref for FullBank<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data.as_ref().expect("bank storage present until drop")[..self.len]
    }
}

impl<T> Drop for FullBank<T> {
    fn drop(&mut self) {
        if let Some(data) = self.data.take() {
            // producer gone: nothing to return to
            let _ = self.home.send((self.bank, data));
        }
    }
}

#[derive(Debug)]
pub struct PingPongBuffer<T> {
    k: usize,
    banks: [Option<Box<[T]>>; 2],
    active: Bank,
    write_pos: usize,
    overrun_count: u64,
    delivered: u64,
    returns_tx: Sender<(Bank, Box<[T]>)>,
    returns_rx: Receiver<(Bank, Box<[T]>)>,
}

impl<T: Copy + Default> PingPongBuffer<T> {
    pub fn new(k: usize) -> Result<Self, AcquisitionError> {
        if k == 0 {
            return param("bank size must be > 0");
        }
        let (returns_tx, returns_rx) = mpsc::channel();
        Ok(Self {
            k,
            banks: [
                Some(vec![T::default(); k].into_boxed_slice()),
                Some(vec![T::default(); k].into_boxed_slice()),
            ],
            active: Bank::A,
            write_pos: 0,
            overrun_count: 0,
            delivered: 0,
            returns_tx,
            returns_rx,
        })
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn active_bank(&self) -> Bank {
        self.active
    }

    pub fn write_pos(&self) -> usize {
        self.write_pos
    }

    pub fn overrun_count(&self) -> u64 {
        self.overrun_count
    }

    /// True when the bank is currently held by a consumer.
    pub fn is_held(&mut self, bank: Bank) -> bool {
        self.reclaim();
        self.banks[bank.index()].is_none()
    }

    fn reclaim(&mut self) {
        while let Ok((bank, data)) = self.returns_rx.try_recv() {
            self.banks[bank.index()] = Some(data);
        }
    }

    /// Store one sample; returns the just-filled bank when it completes.
    pub fn push_sample(&mut self, sample: T) -> Option<FullBank<T>> {
        let bank = self.banks[self.active.index()]
            .as_mut()
            .expect("active bank is owned by the producer");
        bank[self.write_pos] = sample;
        self.write_pos += 1;
        if self.write_pos == self.k {
            self.switch(self.k)
        } else {
            None
        }
    }

    /// Hand off a partially filled active bank (end of stream).
    pub fn flush(&mut self) -> Option<FullBank<T>> {
        if self.write_pos == 0 {
            return None;
        }
        self.switch(self.write_pos)
    }

    fn switch(&mut self, len: usize) -> Option<FullBank<T>> {
        self.write_pos = 0;
        self.reclaim();
        let next = self.active.other();
        if self.banks[next.index()].is_none() {
            self.overrun_count += 1;
            return None;
        }
        let data = self.banks[self.active.index()].take();
        let handle = FullBank {
            data,
            len,
            bank: self.active,
            seq: self.delivered,
            home: self.returns_tx.clone(),
        };
        self.delivered += 1;
        self.active = next;
        Some(handle)
    }
}

/// How time advances during acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Logical time: sample `n` arrives at `n / fs`; runs as fast as possible.
    #[default]
    Virtual,
    /// Wall-clock pacing with a separate consumer thread.
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionConfig {
    pub k: usize,
    pub fs: f64,
    /// Actuation frequency, used only for the `C_max` figure.
    pub f_op: Option<f64>,
    pub clock: Clock,
    /// Realtime pacing runs this many times faster than `fs`.
    pub speedup: f64,
}

impl AcquisitionConfig {
    pub fn new(k: usize, fs: f64) -> Self {
        Self {
            k,
            fs,
            f_op: None,
            clock: Clock::Virtual,
            speedup: 1.0,
        }
    }

    fn validate(&self) -> Result<(), AcquisitionError> {
        buffer_fill_duration(self.k, self.fs)?;
        if let Some(f) = self.f_op {
            max_cycles(self.k, f, self.fs)?;
        }
        if !(self.speedup > 0.0 && self.speedup.is_finite()) {
            return param("speedup must be > 0");
        }
        Ok(())
    }
}

/// Raw per-run measurements, seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Measurements {
    pub per_buffer: Vec<f64>,
    pub per_cycle: Vec<f64>,
    pub samples_in: u64,
    pub samples_delivered: u64,
    pub overrun_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub k: usize,
    pub fs: f64,
    pub f_op: Option<f64>,
    pub clock: Clock,
    /// `B_fd`, seconds.
    pub buffer_fill_duration: f64,
    /// `C_max`
    pub max_cycles: Option<f64>,
    /// Mean `IT_pc`, seconds.
    pub inference_time_per_cycle: Option<f64>,
    /// Mean `IT_pb`, seconds.
    pub inference_time_per_buffer: Option<f64>,
    pub max_inference_time_per_buffer: Option<f64>,
    pub banks_delivered: u64,
    pub samples_in: u64,
    pub samples_delivered: u64,
    pub overrun_count: u64,
    pub lossless: bool,
}

impl TimingReport {
    pub fn from_measurements(
        cfg: &AcquisitionConfig,
        m: &Measurements,
    ) -> Result<Self, AcquisitionError> {
        cfg.validate()?;
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        Ok(Self {
            k: cfg.k,
            fs: cfg.fs,
            f_op: cfg.f_op,
            clock: cfg.clock,
            buffer_fill_duration: buffer_fill_duration(cfg.k, cfg.fs)?,
            max_cycles: cfg.f_op.map(|f| max_cycles(cfg.k, f, cfg.fs)).transpose()?,
            inference_time_per_cycle: mean(&m.per_cycle),
            inference_time_per_buffer: mean(&m.per_buffer),
            max_inference_time_per_buffer: m.per_buffer.iter().copied().reduce(f64::max),
            banks_delivered: m.per_buffer.len() as u64,
            samples_in: m.samples_in,
            samples_delivered: m.samples_delivered,
            overrun_count: m.overrun_count,
            lossless: m.overrun_count == 0,
        })
    }

    /// `IT_pb < B_fd` for every delivered bank (vacuously true with none).
    pub fn keeps_up(&self) -> bool {
        self.max_inference_time_per_buffer
            .is_none_or(|t| t < self.buffer_fill_duration)
    }
}

/// Cost of processing one bank. `None` means "use the measured wall time".
pub type BankCost = Option<Duration>;

/// Feed `source` through a ping-pong buffer, handing each filled bank to
/// `consumer`. A trailing partial bank is delivered at end of stream.
///
/// With [`Clock::Virtual`] the consumer's returned cost is its processing
/// time on the logical clock and banks are released when that time has
/// elapsed. With [`Clock::Realtime`] the consumer runs on its own thread
/// and its wall time is measured.
pub fn run_acquisition<I, F>(
    source: I,
    cfg: &AcquisitionConfig,
    consumer: F,
) -> Result<(TimingReport, Measurements), AcquisitionError>
where
    I: IntoIterator<Item = u16>,
    F: FnMut(&FullBank<u16>) -> BankCost + Send,
{
    cfg.validate()?;
    let m = match cfg.clock {
        Clock::Virtual => run_virtual(source, cfg, consumer)?,
        Clock::Realtime => run_realtime(source, cfg, consumer)?,
    };
    Ok((TimingReport::from_measurements(cfg, &m)?, m))
}

fn run_virtual<I, F>(
    source: I,
    cfg: &AcquisitionConfig,
    mut consumer: F,
) -> Result<Measurements, AcquisitionError>
where
    I: IntoIterator<Item = u16>,
    F: FnMut(&FullBank<u16>) -> BankCost,
{
    let mut buf = PingPongBuffer::<u16>::new(cfg.k)?;
    let mut m = Measurements::default();
    let dt = 1.0 / cfg.fs;
    let mut consumer_free_at = 0.0f64;
    // at most one bank can be held at a time
    let mut held: Option<(f64, FullBank<u16>)> = None;

    let mut deliver = |bank: FullBank<u16>,
                       now: f64,
                       held: &mut Option<(f64, FullBank<u16>)>,
                       m: &mut Measurements| {
        let start = now.max(consumer_free_at);
        let t0 = Instant::now();
        let cost = consumer(&bank)
            .unwrap_or_else(|| t0.elapsed())
            .as_secs_f64();
        consumer_free_at = start + cost;
        m.per_buffer.push(cost);
        m.samples_delivered += bank.len() as u64;
        *held = Some((consumer_free_at, bank));
    };

    let mut n: u64 = 0;
    for sample in source {
        // sample n arrives at n*dt; the bank completes when it is written
        let now = n as f64 * dt;
        n += 1;
        if held.as_ref().is_some_and(|(until, _)| *until <= now) {
            held = None;
        }
        if let Some(bank) = buf.push_sample(sample) {
            deliver(bank, now, &mut held, &mut m);
        }
    }
    let now = n as f64 * dt;
    if held.as_ref().is_some_and(|(until, _)| *until <= now) {
        held = None;
    }
    if let Some(bank) = buf.flush() {
        deliver(bank, now, &mut held, &mut m);
    }
    drop(held);
    m.samples_in = n;
    m.overrun_count = buf.overrun_count();
    Ok(m)
}

fn run_realtime<I, F>(
    source: I,
    cfg: &AcquisitionConfig,
    mut consumer: F,
) -> Result<Measurements, AcquisitionError>
where
    I: IntoIterator<Item = u16>,
    F: FnMut(&FullBank<u16>) -> BankCost + Send,
{
    let mut buf = PingPongBuffer::<u16>::new(cfg.k)?;
    let (tx, rx) = mpsc::channel::<FullBank<u16>>();
    let rate = cfg.fs * cfg.speedup;
    // sleep granularity: roughly 1 ms of samples
    let chunk = ((rate / 1000.0).ceil() as u64).max(1);

    let (per_buffer, delivered, n) = thread::scope(|scope| {
        let worker = scope.spawn(move || {
            let mut times = Vec::new();
            let mut delivered = 0u64;
            for bank in rx {
                let t0 = Instant::now();
                consumer(&bank);
                times.push(t0.elapsed().as_secs_f64());
                delivered += bank.len() as u64;
                bank.release();
            }
            (times, delivered)
        });
        let start = Instant::now();
        let mut n: u64 = 0;
        for sample in source {
            if n.is_multiple_of(chunk) {
                let due = Duration::from_secs_f64(n as f64 / rate);
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    thread::sleep(wait);
                }
            }
            n += 1;
            if let Some(bank) = buf.push_sample(sample) {
                let _ = tx.send(bank);
            }
        }
        if let Some(bank) = buf.flush() {
            let _ = tx.send(bank);
        }
        drop(tx);
        let (times, delivered) = worker.join().expect("consumer thread panicked");
        (times, delivered, n)
    });
    Ok(Measurements {
        per_buffer,
        per_cycle: Vec::new(),
        samples_in: n,
        samples_delivered: delivered,
        overrun_count: buf.overrun_count(),
    })
}
