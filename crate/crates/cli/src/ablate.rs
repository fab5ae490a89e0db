//! Mutation-probability and population-size sweeps.

use genetic_nas::config::RunConfig;
use genetic_nas::export::{write_atomic, RunLock};
use genetic_nas::par;
use genetic_nas::search::{run_search, SearchHistory};

use crate::commands::Source;

pub const HISTORY_FILE: &str = "ablate_history.csv";
pub const SUMMARY_FILE: &str = "ablate_summary.csv";
pub const CONFIG_FILE: &str = "ablate.toml";

const HISTORY_HEADER: &str = "sweep,value,seed,epoch,mean,max,min,std,inserted";
const SUMMARY_HEADER: &str = "sweep,value,runs,median_final_max,median_final_mean";

struct Arm {
    sweep: &'static str,
    value: String,
    config: RunConfig,
}

fn arms(config: &RunConfig) -> Vec<Arm> {
    let mut out = Vec::new();
    for &p in &config.ablate_mutation_probs {
        let mut c = config.clone();
        c.mutation_prob = p;
        out.push(Arm {
            sweep: "mutation_prob",
            value: format!("{p}"),
            config: c,
        });
    }
    for &n in &config.ablate_population_sizes {
        let mut c = config.clone();
        c.population_size = n;
        out.push(Arm {
            sweep: "population_size",
            value: n.to_string(),
            config: c,
        });
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Every arm runs `ablate_seeds` searches with seeds `seed, seed + 1, ...`.
/// Epoch 0 in the history file is the initial population.
pub fn ablate(config: &RunConfig) -> anyhow::Result<()> {
    let arms = arms(config);
    for arm in &arms {
        arm.config.validate()?;
    }
    let out = &config.out;
    let _lock = RunLock::acquire(out)?;
    write_atomic(&out.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
    let source = Source::load(config)?;

    let mut history = String::from(HISTORY_HEADER);
    history.push('\n');
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for arm in &arms {
        log::info!("sweep {} = {}", arm.sweep, arm.value);
        let runs: Vec<genetic_nas::Result<SearchHistory>> =
            par::map_range(config.ablate_seeds, |s| {
                let mut c = arm.config.clone();
                c.seed = config.seed.wrapping_add(s as u64);
                let sc = c.search_config()?;
                let o = run_search(&sc, source.evaluator(), None, &mut |_, _| Ok(()))?;
                Ok(o.state.history)
            });
        let mut finals_max = Vec::new();
        let mut finals_mean = Vec::new();
        for (s, run) in runs.into_iter().enumerate() {
            let h = run?;
            let seed = config.seed.wrapping_add(s as u64);
            let i = &h.initial;
            history.push_str(&format!(
                "{},{},{seed},0,{:.6},{:.6},{:.6},{:.6},0\n",
                arm.sweep, arm.value, i.mean, i.max, i.min, i.std
            ));
            for r in &h.rows {
                history.push_str(&format!(
                    "{},{},{seed},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                    arm.sweep, arm.value, r.epoch, r.mean, r.max, r.min, r.std, r.inserted
                ));
            }
            let last = h.rows.last().map_or((i.max, i.mean), |r| (r.max, r.mean));
            finals_max.push(last.0);
            finals_mean.push(last.1);
        }
        summary.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            arm.sweep,
            arm.value,
            finals_max.len(),
            median(&mut finals_max),
            median(&mut finals_mean)
        ));
    }
    write_atomic(&out.join(HISTORY_FILE), history.as_bytes())?;
    write_atomic(&out.join(SUMMARY_FILE), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}
