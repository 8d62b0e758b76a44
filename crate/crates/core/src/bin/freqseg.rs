fn main() {
    println!("freqseg CLI placeholder");
}
