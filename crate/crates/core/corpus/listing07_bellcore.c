// OpenSSL rsa_ossl_mod_exp: the CRT result is re-verified and the
// BN_is_zero result, returned in eax, decides whether it is trusted.
static int rsa_ossl_mod_exp(BIGNUM *r0, const BIGNUM *I, RSA *rsa, BN_CTX *ctx) {
    int ret = 0;
    register int zero asm("rax") = 0;

    if (!BN_mod_exp_mont(vrfy, r0, rsa->e, rsa->n, ctx, rsa->_method_mod_n))
        goto err;
    if (!BN_sub(vrfy, vrfy, I))
        goto err;
    zero = BN_is_zero(vrfy);
    if (zero) {
        bn_correct_top(r0);
        ret = 1;
        goto err;
    }
    ret = BN_mod_exp(r0, I, rsa->d, rsa->n, ctx);
 err:
    return ret;
}

// Caller side: a nonzero return means the signature is used.
int rsa_sign(BIGNUM *r0, const BIGNUM *I, RSA *rsa, BN_CTX *ctx) {
    int ret = 0;
    ret = rsa_ossl_mod_exp(r0, I, rsa, ctx);
    if (ret != 0)
        return SIGNED;
    return FAILED;
}
