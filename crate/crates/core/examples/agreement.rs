//! Fleiss' kappa and Finn's r over a rating matrix given as TSV.

use meed::evaluation::{finns_r, fleiss_kappa, RatingMatrix};

const RATINGS: &str = "\
2\t2\t1
1\t1\t1
0\t1\t0
2\t2\t2
1\t0\t1
0\t0\t0
2\t1\t2
";

fn main() -> meed::Result<()> {
    let m = RatingMatrix::parse(RATINGS, 3)?;
    println!("{} items rated by {} raters on a {}-point scale", m.items(), m.raters(), m.scale());
    println!("Fleiss' kappa {:.4}", fleiss_kappa(&m)?);
    println!("Finn's r      {:.4}", finns_r(&m, 3)?);
    Ok(())
}
