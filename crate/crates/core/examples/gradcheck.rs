//! Central finite differences against the tape for every op and for the
//! full pre-training loss of a tiny model.

use audiomosaic::gradsuite::run_suite;

fn main() -> Result<(), audiomosaic::Error> {
    let rows = run_suite(0)?;
    for r in &rows {
        println!("{:<26} {:>10.2e} {:>6} {}", r.op, r.error, r.coordinates, if r.passed() { "ok" } else { "FAIL" });
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", rows.len());
    Ok(())
}
