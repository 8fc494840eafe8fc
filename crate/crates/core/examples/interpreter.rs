//! Generate programs across difficulty levels and run them through the
//! reference interpreter. Pass a script as the first argument to run it instead.
//!
//! cargo run --example interpreter
//! cargo run --example interpreter -- 'a=5
//! for x in range(3):a+=2
//! print(a*3)'

use gfrnn::numerics::Rng;
use gfrnn::progeval::{generate_program, interpret, parse_program, TaskVocab};

fn main() -> gfrnn::Result<()> {
    if let Some(script) = std::env::args().nth(1) {
        let program = parse_program(&script)?;
        println!("nesting {}\n{program}\n=> {}", program.nesting(), interpret(&script)?);
        return Ok(());
    }
    let vocab = TaskVocab::v1();
    let mut rng = Rng::new(2015);
    for (nesting, length) in [(1, 2), (2, 4), (3, 6), (4, 8), (5, 10)] {
        let s = generate_program(nesting, length, &mut rng)?;
        println!("--- nesting {nesting}, target length {length}, {} input symbols", vocab.encode_script(&s.script)?.len());
        println!("{}", s.script);
        println!("=> {}\n", s.target);
    }
    Ok(())
}
