fn main() {
    println!("sketchagent");
}
