//! Regenerates the synthetic fixture under `tests/fixtures/synthetic`:
//! snapshots, calendar, truth, an ICU-like indicator leading the counts by
//! 14 days, run configs for `R` and `RL` and a list of evaluation dates.
//!
//! cargo run -p nowcast-core --example synthetic_fixture [-- DIR]

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{Days, NaiveDate};
use nowcast_core::data::{write_series, ReportingCalendar};
use nowcast_core::simulate::{simulate_surveillance, write_simulation, SimulationConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

const LEAD: u64 = 14;

fn main() -> nowcast_core::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic"));
    let start = NaiveDate::from_ymd_opt(2021, 1, 4).unwrap();
    let mut config = SimulationConfig::realistic(start, 112, 21, 11);
    let good_friday = NaiveDate::from_ymd_opt(2021, 4, 2).unwrap();
    config.calendar = ReportingCalendar::tuesday_to_friday().with_holidays([good_friday]);
    let out = simulate_surveillance(&config)?;
    std::fs::create_dir_all(&dir).expect("create fixture directory");
    write_simulation(&dir, &out, &config.calendar)?;

    // icu_t ~ Poisson(0.3 lambda_{t + LEAD}), holding lambda at its last value
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lambda = out.lambda();
    let icu: BTreeMap<NaiveDate, f64> = (0..lambda.len())
        .map(|i| {
            let l = lambda[(i + LEAD as usize).min(lambda.len() - 1)];
            (start + Days::new(i as u64), Poisson::new(0.3 * l).unwrap().sample(&mut rng))
        })
        .collect();
    write_series(&dir.join("icu.csv"), &icu)?;

    let dates: Vec<NaiveDate> = config.calendar.reporting_days(start + Days::new(100), config.end());
    let mut text = String::from("reporting_date\n");
    for d in &dates {
        text.push_str(&format!("{d}\n"));
    }
    std::fs::write(dir.join("dates.txt"), text).expect("write dates");

    let r = serde_json::json!({
        "model": { "variant": "R" },
        "data": { "snapshots": "snapshots", "calendar": "calendar.csv" },
        "max_delay": 21,
        "window_length": 84,
        "seed": 1,
        "output": "out_r",
        "nowcast": { "now": "2021-04-23" },
        "evaluation": { "dates_file": "dates.txt" }
    });
    let rl = serde_json::json!({
        "model": {
            "variant": "RL",
            "indicators": [
                { "name": "icu", "file": "icu.csv", "lag": LEAD, "smoothing": 7, "transform": "relative_weekly_change" }
            ]
        },
        "data": { "snapshots": "snapshots", "calendar": "calendar.csv" },
        "max_delay": 21,
        "window_length": 84,
        "seed": 1,
        "output": "out_rl",
        "nowcast": { "now": "2021-04-23" },
        "evaluation": { "dates_file": "dates.txt" }
    });
    for (name, value) in [("config_r.json", r), ("config_rl.json", rl)] {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&value).unwrap() + "\n").expect("write config");
    }
    println!("fixture written to {}", dir.display());
    Ok(())
}
