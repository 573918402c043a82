//! Calendar indexing and the fused intra-day/weekly time embedding.

use std::fmt;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use pmdm_tensor::{fan_in_bound, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bind::Binder;
use crate::error::{Error, Result, StageExt};

pub const MINUTES_PER_DAY: u32 = 1440;
pub const DAYS_PER_WEEK: usize = 7;

const WEEKDAYS: [&str; 7] = [
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
];

/// Naive wall-clock time: whole days since 1970-01-01 plus minutes since
/// midnight. No time zone or DST handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub days: i64,
    pub minute_of_day: u32,
}

impl Timestamp {
    pub fn new(days: i64, minute_of_day: u32) -> Result<Self> {
        if minute_of_day >= MINUTES_PER_DAY {
            return Err(Error::Data(format!("minute of day {minute_of_day} is out of range")));
        }
        Ok(Self {
            days,
            minute_of_day,
        })
    }

    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
        Self {
            days: (dt.date() - epoch).num_days(),
            minute_of_day: dt.hour() * 60 + dt.minute(),
        }
    }

    pub fn to_datetime(self) -> NaiveDateTime {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
        let date = epoch + chrono::Duration::days(self.days);
        date.and_hms_opt(self.minute_of_day / 60, self.minute_of_day % 60, 0)
            .expect("minute of day < 1440")
    }

    /// Accepts `YYYY-MM-DDTHH:MM[:SS]` or the same with a space separator.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        const FORMATS: [&str; 4] = [
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%d %H:%M:%S",
            "%Y-%m-%d %H:%M",
        ];
        FORMATS
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .map(Self::from_datetime)
            .ok_or_else(|| Error::Data(format!("cannot parse timestamp `{s}`")))
    }

    pub fn plus_minutes(self, minutes: u64) -> Self {
        let total = self.minute_of_day as u64 + minutes;
        Self {
            days: self.days + (total / MINUTES_PER_DAY as u64) as i64,
            minute_of_day: (total % MINUTES_PER_DAY as u64) as u32,
        }
    }

    /// Monday = 0 ... Sunday = 6.
    pub fn weekday(self) -> usize {
        // 1970-01-01 was a Thursday.
        (self.days + 3).rem_euclid(7) as usize
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%S"))
    }
}

impl From<NaiveDateTime> for Timestamp {
    fn from(dt: NaiveDateTime) -> Self {
        Self::from_datetime(dt)
    }
}

/// Maps timestamps to intra-day slot and weekday indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarIndexer {
    interval_minutes: u32,
}

impl CalendarIndexer {
    pub fn new(interval_minutes: u32) -> Result<Self> {
        if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes != 0 {
            return Err(Error::Config(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        Ok(Self { interval_minutes })
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn slots_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes) as usize
    }

    pub fn day_index(&self, t: Timestamp) -> usize {
        (t.minute_of_day / self.interval_minutes) as usize
    }

    pub fn week_index(&self, t: Timestamp) -> usize {
        t.weekday()
    }

    /// Clock label of a slot, e.g. `1:00:00`.
    pub fn slot_label(&self, slot: usize) -> String {
        let minutes = slot as u32 * self.interval_minutes;
        format!("{}:{:02}:00", minutes / 60, minutes % 60)
    }

    pub fn weekday_name(week_index: usize) -> &'static str {
        WEEKDAYS[week_index % 7]
    }
}

/// Names of the two learnable pools `T^D [N_d, p]` and `T^W [7, p]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeEmbeddingPools {
    pub day_pool: String,
    pub week_pool: String,
    pub slots_per_day: usize,
    pub width: usize,
}

impl TimeEmbeddingPools {
    pub fn new(prefix: &str, slots_per_day: usize, width: usize) -> Self {
        Self {
            day_pool: format!("{prefix}.day"),
            week_pool: format!("{prefix}.week"),
            slots_per_day,
            width,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 0.5 * fan_in_bound(self.width);
        store.insert(
            self.day_pool.clone(),
            Tensor::uniform(&[self.slots_per_day, self.width], bound, rng),
        );
        store.insert(
            self.week_pool.clone(),
            Tensor::uniform(&[DAYS_PER_WEEK, self.width], bound, rng),
        );
    }

    /// `T^D[day] ⊙ T^W[week]` for each index pair, shaped `[len, p]`.
    pub fn lookup<'g>(
        &self,
        binder: &Binder<'g, '_>,
        day: &[usize],
        week: &[usize],
    ) -> Result<Var<'g>> {
        time_embedding(
            binder.get(&self.day_pool)?,
            binder.get(&self.week_pool)?,
            day,
            week,
        )
    }
}

/// Fused time embedding: rows `day[i]` of the intra-day pool multiplied
/// elementwise by rows `week[i]` of the weekly pool.
pub fn time_embedding<'g>(
    day_pool: Var<'g>,
    week_pool: Var<'g>,
    day: &[usize],
    week: &[usize],
) -> Result<Var<'g>> {
    let (ds, ws) = (day_pool.shape(), week_pool.shape());
    if ds.len() != 2 || ws.len() != 2 || ds[1] != ws[1] {
        return Err(Error::Config(format!(
            "time embedding pools must share their width, got {ds:?} and {ws:?}"
        )));
    }
    if day.len() != week.len() {
        return Err(Error::Config(format!(
            "{} day indices but {} week indices",
            day.len(),
            week.len()
        )));
    }
    let d = day_pool.gather_rows(day).stage("time embedding (day pool)")?;
    let w = week_pool.gather_rows(week).stage("time embedding (week pool)")?;
    d.mul(w).stage("time embedding")
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmdm_tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    // 2024-01-01 is a Monday; 2024-01-04 a Thursday.
    const MONDAY_0005: &str = "2024-01-01T00:05";
    const MONDAY_0100: &str = "2024-01-01T01:00";
    const THURSDAY_0100: &str = "2024-01-04T01:00";

    #[test]
    fn documented_index_examples() {
        let hourly = CalendarIndexer::new(60).unwrap();
        assert_eq!(hourly.slot_label(hourly.day_index(ts(MONDAY_0100))), "1:00:00");
        let five = CalendarIndexer::new(5).unwrap();
        assert_eq!(five.day_index(ts(MONDAY_0005)), 1);
        assert_eq!(five.slot_label(1), "0:05:00");
        assert_eq!(CalendarIndexer::weekday_name(five.week_index(ts(MONDAY_0005))), "Monday");
        assert_eq!(
            CalendarIndexer::weekday_name(five.week_index(ts(THURSDAY_0100))),
            "Thursday"
        );
        assert_eq!(five.week_index(ts(THURSDAY_0100)), 3);
    }

    #[test]
    fn midnight_is_slot_zero_for_any_interval() {
        for interval in [1, 5, 15, 30, 60, 120, 1440] {
            let c = CalendarIndexer::new(interval).unwrap();
            assert_eq!(c.day_index(ts("2024-01-01T00:00")), 0);
        }
    }

    #[test]
    fn weekly_periodicity() {
        let c = CalendarIndexer::new(30).unwrap();
        let a = ts("2024-01-01T07:30");
        let b = ts("2024-01-08T07:30");
        assert_eq!(c.week_index(a), c.week_index(b));
        assert_eq!(c.day_index(a), c.day_index(b));
        assert_eq!(a.plus_minutes(7 * 1440), b);
    }

    #[test]
    fn rejects_intervals_that_do_not_divide_a_day() {
        assert!(CalendarIndexer::new(7).is_err());
        assert!(CalendarIndexer::new(0).is_err());
        assert_eq!(CalendarIndexer::new(30).unwrap().slots_per_day(), 48);
    }

    #[test]
    fn weekdays_before_the_epoch() {
        // 1969-12-29 was a Monday.
        assert_eq!(ts("1969-12-29T12:00").weekday(), 0);
        assert_eq!(ts("1970-01-01T00:00").weekday(), 3);
    }

    #[test]
    fn timestamp_round_trips_through_display() {
        let t = ts("2016-07-01 23:55:00");
        assert_eq!(Timestamp::parse(&t.to_string()).unwrap(), t);
        assert_eq!(t.plus_minutes(5), ts("2016-07-02T00:00"));
    }

    fn pools(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        (
            Tensor::uniform(&[48, 4], 1.0, rng),
            Tensor::uniform(&[7, 4], 1.0, rng),
        )
    }

    #[test]
    fn embedding_is_elementwise_product_of_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (day, week) = pools(&mut rng);
        let g = Graph::new();
        let c = CalendarIndexer::new(30).unwrap();
        let t = ts(MONDAY_0100);
        let (di, wi) = (c.day_index(t), c.week_index(t));
        let e = time_embedding(g.constant(day.clone()), g.constant(week.clone()), &[di], &[wi])
            .unwrap()
            .value();
        assert_eq!(e.shape(), &[1, 4]);
        for k in 0..4 {
            assert_eq!(e.at(&[0, k]), day.at(&[di, k]) * week.at(&[wi, k]));
        }
    }

    #[test]
    fn identity_and_absorbing_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (day, _) = pools(&mut rng);
        let g = Graph::new();
        let e = time_embedding(g.constant(day.clone()), g.constant(Tensor::ones(&[7, 4])), &[3], &[2])
            .unwrap()
            .value();
        assert_eq!(e.data(), &day.data()[12..16]);
        let e = time_embedding(g.constant(Tensor::zeros(&[48, 4])), g.constant(day), &[3], &[2])
            .unwrap()
            .value();
        assert!(e.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let g = Graph::new();
        let r = time_embedding(
            g.constant(Tensor::zeros(&[48, 4])),
            g.constant(Tensor::zeros(&[7, 3])),
            &[0],
            &[0],
        );
        assert!(r.is_err());
    }

    #[test]
    fn gradient_touches_one_row_per_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (day, week) = pools(&mut rng);
        let g = Graph::new();
        let (dv, wv) = (g.param(day), g.param(week));
        let e = time_embedding(dv, wv, &[10], &[4]).unwrap();
        let grads = g.backward(e.sum()).unwrap();
        let gd = grads.get(dv).unwrap();
        let gw = grads.get(wv).unwrap();
        for r in 0..48 {
            let nonzero = (0..4).any(|k| gd.at(&[r, k]) != 0.0);
            assert_eq!(nonzero, r == 10, "day row {r}");
        }
        for r in 0..7 {
            let nonzero = (0..4).any(|k| gw.at(&[r, k]) != 0.0);
            assert_eq!(nonzero, r == 4, "week row {r}");
        }
    }
}
