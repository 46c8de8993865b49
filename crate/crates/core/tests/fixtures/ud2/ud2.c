int main(void)
{
    __asm__ volatile(".globl trap_site\ntrap_site:\n\tud2");
    return 0;
}
