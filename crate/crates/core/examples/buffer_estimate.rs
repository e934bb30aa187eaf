//! How long a block-buffered job keeps its monitor in the dark, and which
//! output lines count as progress.
//!
//!     cargo run --example buffer_estimate -- [buffer_bytes line_bytes minutes_per_line]

use std::time::Duration;

use atm::agent::{estimate_buffer_fill, parse_progress_line, ProgressPatterns};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let nums: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let (buffer, line, minutes) = match nums[..] {
        [b, l, m] => (b, l, m),
        [] => (3000, 30, 10),
        _ => return Err("give three numbers or none".into()),
    };
    let fill = estimate_buffer_fill(buffer, line, Duration::from_secs(minutes * 60))?;
    let secs = fill.delay.as_secs();
    println!(
        "{buffer} B buffer, {line} B lines every {minutes} min: {} lines, first output after {} min ({:.1} h)",
        fill.lines_to_fill,
        secs / 60,
        secs as f64 / 3600.0
    );

    let patterns = ProgressPatterns::default();
    for sample in [
        "completed 20 from 200 events",
        "  completed 200 from 200 events",
        "completed 300 from 200 events",
        "Event 17 processed",
    ] {
        match parse_progress_line(sample, &patterns) {
            Some((done, total)) => println!("{sample:?} -> {done}/{total}"),
            None => println!("{sample:?} -> not progress"),
        }
    }

    // Sites can add their own templates.
    let custom = ProgressPatterns::new([r"^step (?P<done>\d+)/(?P<total>\d+)$"])?;
    println!("custom: {:?}", parse_progress_line("step 3/9", &custom));
    Ok(())
}
